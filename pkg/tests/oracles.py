"""Independent reference implementations used as test oracles.

Plain Python loops, written straight from the definitions and sharing no
code with the package.
"""

import itertools
import math

EPS = 1e-6
CAP = 10.0


def ratio(b, d):
    if b < EPS and abs(d) < EPS:
        return 1.0
    r = d / max(b, EPS)
    return min(max(r, 0.0), CAP)


def window_breakdown(base, dis, t_d, t_end):
    """(t_f, t_r, FP, RP, rho_k) for one indicator and one window."""
    n = len(dis)
    last = min(t_end, n - 1)
    t_f = t_d
    for t in range(t_d, last + 1):
        if dis[t] < dis[t_f]:
            t_f = t
    t_r = min(t_end, n)
    fail = [ratio(base[t], dis[t]) for t in range(t_d, t_f)]
    rec = [ratio(base[t], dis[t]) for t in range(t_f, t_r)]
    fp = sum(fail) / len(fail) if fail else 1.0
    rp = sum(rec) / len(rec) if rec else 1.0
    dt_f, dt_r = t_f - t_d, t_r - t_f
    rho = (t_d + fp * dt_f + rp * dt_r) / (t_d + dt_f + dt_r)
    return t_f, t_r, fp, rp, max(rho, EPS)


def harmonic(xs):
    return len(xs) / sum(1.0 / x for x in xs)


def resilience(base_rows, dis_rows, windows):
    """Return (rho, per-indicator rho_k list, list of per-window tuples)."""
    per_k, details = [], []
    for base, dis in zip(base_rows, dis_rows):
        rows = [window_breakdown(list(base), list(dis), a, b) for a, b in windows]
        details.append(rows)
        per_k.append(harmonic([r[4] for r in rows]))
    return harmonic(per_k), per_k, details


def midranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mann_whitney_exact(a, b):
    """Two-sided permutation p of the rank sum by full enumeration of group labels."""
    pooled = list(a) + list(b)
    ranks = midranks(pooled)
    n1, N = len(a), len(pooled)
    mean = n1 * (N + 1) / 2
    obs = abs(sum(ranks[:n1]) - mean)
    hits = total = 0
    for idx in itertools.combinations(range(N), n1):
        total += 1
        if abs(sum(ranks[i] for i in idx) - mean) >= obs - 1e-9:
            hits += 1
    return hits / total


def bh_step_up(pvals, alpha):
    """Hand-executed step-up rule: reject the k smallest, k the largest rank with p_(k) <= k*alpha/m."""
    m = len(pvals)
    order = sorted(range(m), key=lambda i: (pvals[i], i))
    k_max = 0
    for k in range(1, m + 1):
        if pvals[order[k - 1]] <= k * alpha / m:
            k_max = k
    return {order[k] for k in range(k_max)}


def mlp_forward(theta, sizes, x):
    """Forward pass with explicit loops over units."""
    pos = 0
    h = list(x)
    for li in range(len(sizes) - 1):
        fan_in, fan_out = sizes[li], sizes[li + 1]
        W = [[theta[pos + i * fan_out + j] for j in range(fan_out)] for i in range(fan_in)]
        pos += fan_in * fan_out
        b = theta[pos:pos + fan_out]
        pos += fan_out
        z = [sum(h[i] * W[i][j] for i in range(fan_in)) + b[j] for j in range(fan_out)]
        h = [math.tanh(v) for v in z] if li < len(sizes) - 2 else z
    return h[0]
