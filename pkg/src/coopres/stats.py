"""Two-sample rank test and multiple-comparison corrections."""

from __future__ import annotations

import math

import numpy as np

# at or below this pooled size the exact null distribution is used
EXACT_MAX_N = 30


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_two_sided(doubled_ranks: np.ndarray, n1: int, observed: int) -> float:
    """P(|R - E R| >= |r_obs - E R|) for the rank sum R of a random n1-subset.

    Ranks are doubled so that midranks are integers; the subset-sum counts are
    built by dynamic programming over (subset size, sum).
    """
    total = int(doubled_ranks.sum())
    N = len(doubled_ranks)
    counts = np.zeros((n1 + 1, total + 1), dtype=np.int64)
    counts[0, 0] = 1
    for r in doubled_ranks.astype(int):
        counts[1:, r:] = counts[1:, r:] + counts[:-1, :total + 1 - r]
    dist = counts[n1]
    # N * |R - E[R]| keeps the comparison in exact integers
    dev = np.abs(N * np.arange(total + 1) - n1 * total)
    obs_dev = abs(N * observed - n1 * total)
    return float(dist[dev >= obs_dev].sum() / dist.sum())


def mann_whitney_u(a, b, method: str = "auto") -> tuple[float, float]:
    """Return ``(U, two_sided_p)`` with ``U`` counted for sample ``a``.

    ``method="normal"`` uses the normal approximation with tie-corrected
    variance and continuity correction; ``"exact"`` the permutation null
    distribution of the (mid)rank sum; ``"auto"`` is exact for pooled sizes up
    to :data:`EXACT_MAX_N` and normal above.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = midranks(pooled)
    r1 = ranks[:n1].sum()
    U = float(r1 - n1 * (n1 + 1) / 2)
    N = n1 + n2
    if np.all(pooled == pooled[0]):
        return U, 1.0
    if method == "auto":
        method = "exact" if N <= EXACT_MAX_N else "normal"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(int)
        return U, min(1.0, _exact_two_sided(doubled, n1, int(doubled[:n1].sum())))
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float((tie_counts ** 3 - tie_counts).sum())
    var = n1 * n2 / 12.0 * ((N + 1) - tie_term / (N * (N - 1)))
    if var <= 0:
        return U, 1.0
    z = max(abs(U - n1 * n2 / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return U, min(1.0, math.erfc(z / math.sqrt(2.0)))


def benjamini_hochberg(pvals, alpha: float = 0.05) -> list[tuple[float, bool]]:
    """Step-up FDR control; returns ``(adjusted_p, rejected)`` in input order."""
    p = np.asarray(pvals, dtype=float)
    m = len(p)
    if m == 0:
        return []
    if ((p < 0) | (p > 1)).any():
        raise ValueError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="mergesort")
    ranked = p[order]
    k = np.arange(1, m + 1)
    below = np.flatnonzero(ranked <= k * alpha / m)
    n_reject = below[-1] + 1 if len(below) else 0
    adj_sorted = np.minimum.accumulate((ranked * m / k)[::-1])[::-1]
    adj = np.empty(m)
    adj[order] = np.minimum(adj_sorted, 1.0)
    rejected = np.zeros(m, dtype=bool)
    rejected[order[:n_reject]] = True
    return [(float(a), bool(r)) for a, r in zip(adj, rejected)]


def bonferroni(pvals, alpha: float = 0.05) -> list[tuple[float, bool]]:
    p = np.asarray(pvals, dtype=float)
    adj = np.minimum(p * len(p), 1.0)
    return [(float(a), bool(a <= alpha)) for a in adj]
