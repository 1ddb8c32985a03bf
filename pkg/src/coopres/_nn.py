"""Tiny dense networks over flat parameter vectors.

Everything that learns in this package (the MLP reward model, the policy and
value networks) is a stack of affine layers with tanh between them. Keeping
the parameters in one flat float64 vector makes finite-difference checks,
weight decay masks and Adam trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Layout:
    """Shapes of an MLP ``sizes[0] -> sizes[1] -> ... -> sizes[-1]``."""

    sizes: tuple[int, ...]

    @property
    def n_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        k = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = theta[k:k + a * b].reshape(a, b)
            k += a * b
            layers.append((W, theta[k:k + b]))
            k += b
        return layers

    def weight_mask(self) -> np.ndarray:
        """1.0 on weight entries, 0.0 on biases."""
        mask = np.zeros(self.n_params)
        k = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            mask[k:k + a * b] = 1.0
            k += a * b + b
        return mask

    def init(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        """Uniform(+-fan_in**-0.5) weights, zero biases."""
        parts = []
        n_layers = len(self.sizes) - 1
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = a ** -0.5
            W = rng.uniform(-lim, lim, size=(a, b))
            if i == n_layers - 1:
                W *= out_scale
            parts.append(W.ravel())
            parts.append(np.zeros(b))
        return np.concatenate(parts)


def forward(layout: Layout, theta: np.ndarray, X: np.ndarray):
    """Return (output, activations) with tanh on hidden layers."""
    acts = [X]
    h = X
    layers = layout.unpack(theta)
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward(layout: Layout, theta: np.ndarray, acts: list, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * output)`` w.r.t. ``theta``."""
    layers = layout.unpack(theta)
    grads = []
    g = upstream
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = acts[i]
        grads.append(g.sum(axis=0))
        grads.append((a_in.T @ g).ravel())
        if i > 0:
            g = (g @ W.T) * (1.0 - a_in ** 2)
    return np.concatenate(grads[::-1])


class Adam:
    """Plain Adam on a flat vector; state lives in the instance."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
