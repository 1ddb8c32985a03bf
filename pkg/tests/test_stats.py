import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopres.stats import benjamini_hochberg, bonferroni, mann_whitney_u, midranks
from oracles import bh_step_up, mann_whitney_exact
from oracles import midranks as midranks_oracle

SIZES = [(n, m) for n in range(1, 10) for m in range(1, 10) if n + m <= 10]


def test_midranks():
    assert midranks([3, 1, 3, 2]).tolist() == [3.5, 1, 3.5, 2]
    x = np.random.default_rng(0).integers(0, 4, 30)
    assert midranks(x).tolist() == midranks_oracle(list(x))


@pytest.mark.parametrize("n, m", SIZES)
def test_small_samples_match_enumeration(n, m):
    rng = np.random.default_rng(100 * n + m)
    for draw in range(5):
        # integer draws make ties common
        a = rng.integers(0, 6, n).astype(float)
        b = rng.integers(0, 6, m).astype(float) + draw % 3
        U, p = mann_whitney_u(a, b)
        if np.all(np.concatenate([a, b]) == a[0]):
            assert p == 1.0
            continue
        assert abs(p - mann_whitney_exact(a, b)) <= 0.02
        assert p == pytest.approx(mann_whitney_exact(a, b), abs=1e-12)


def test_examples():
    U, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
    assert U == 0
    assert p == pytest.approx(2 / 20)  # the two extreme of the 20 assignments
    assert mann_whitney_u([4, 5, 6], [1, 2, 3])[0] == 9
    assert mann_whitney_u([1, 2, 2], [2, 1, 2])[1] == 1.0
    assert mann_whitney_u([7, 7], [7, 7, 7]) == (3.0, 1.0)
    rng = np.random.default_rng(1)
    _, p = mann_whitney_u(rng.normal(0, 1, 500), rng.normal(1, 1, 500))
    assert p < 1e-6
    with pytest.raises(ValueError):
        mann_whitney_u([], [1])


def _normal_reference(a, b):
    """Textbook normal approximation written out separately."""
    pooled = list(a) + list(b)
    r = midranks_oracle(pooled)
    n1, n2 = len(a), len(b)
    N = n1 + n2
    U = sum(r[:n1]) - n1 * (n1 + 1) / 2
    ties = {}
    for v in pooled:
        ties[v] = ties.get(v, 0) + 1
    t = sum(c ** 3 - c for c in ties.values())
    var = n1 * n2 / 12 * (N + 1 - t / (N * (N - 1)))
    z = max(abs(U - n1 * n2 / 2) - 0.5, 0) / math.sqrt(var)
    return U, math.erfc(z / math.sqrt(2))


def test_normal_approximation_for_large_samples():
    rng = np.random.default_rng(2)
    a = np.round(rng.normal(0, 1, 60), 1)
    b = np.round(rng.normal(0.3, 1, 45), 1)
    U, p = mann_whitney_u(a, b)
    Ur, pr = _normal_reference(list(a), list(b))
    assert U == Ur and p == pytest.approx(pr, rel=1e-12)
    assert mann_whitney_u(a[:12], b[:12], method="normal")[1] == pytest.approx(
        _normal_reference(list(a[:12]), list(b[:12]))[1], rel=1e-12)


def test_exact_and_normal_close_near_threshold():
    rng = np.random.default_rng(3)
    a, b = rng.normal(0, 1, 15), rng.normal(0.5, 1, 15)
    pe = mann_whitney_u(a, b, method="exact")[1]
    pn = mann_whitney_u(a, b, method="normal")[1]
    assert abs(pe - pn) < 0.02


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=6), st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_swap_symmetry(a, b):
    Ua, pa = mann_whitney_u(a, b)
    Ub, pb = mann_whitney_u(b, a)
    assert Ua + Ub == len(a) * len(b)
    assert pa == pytest.approx(pb, abs=1e-12)
    assert 0 <= pa <= 1


def test_bh_examples():
    assert [r for _, r in benjamini_hochberg([0.01, 0.02, 0.9])] == [True, True, False]
    assert benjamini_hochberg([0.3]) == [(0.3, False)]
    assert not any(r for _, r in benjamini_hochberg([1.0] * 5))
    assert benjamini_hochberg([]) == []
    with pytest.raises(ValueError):
        benjamini_hochberg([1.2])


def test_bh_matches_hand_step_up():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = int(rng.integers(1, 15))
        p = np.where(rng.random(m) < 0.5, rng.uniform(0, 0.02, m), rng.uniform(0, 1, m))
        got = {i for i, (_, r) in enumerate(benjamini_hochberg(p, 0.05)) if r}
        assert got == bh_step_up(list(p), 0.05)


def test_bh_step_up_beats_step_down():
    # 0.04 > 1*0.05/2 but 0.045 <= 2*0.05/2, so both go
    assert [r for _, r in benjamini_hochberg([0.045, 0.04])] == [True, True]


def _adjusted_oracle(p):
    m = len(p)
    rank = lambda x: sum(q <= x for q in p)
    return [min(1.0, min(q * m / rank(q) for q in p if q >= x)) for x in p]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.randoms(use_true_random=False))
def test_bh_properties(p, rnd):
    res = benjamini_hochberg(p, 0.05)
    adj = [a for a, _ in res]
    assert adj == pytest.approx(_adjusted_oracle(p), rel=1e-12)
    # monotone in raw-p order and rejection equals adjusted <= alpha
    order = sorted(range(len(p)), key=lambda i: p[i])
    assert all(adj[order[k]] <= adj[order[k + 1]] + 1e-15 for k in range(len(p) - 1))
    assert {i for i, (_, r) in enumerate(res) if r} == {i for i, a in enumerate(adj) if a <= 0.05}
    # permutation invariance of the rejected set
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    res2 = benjamini_hochberg([p[i] for i in perm], 0.05)
    assert {perm[k] for k, (_, r) in enumerate(res2) if r} == {i for i, (_, r) in enumerate(res) if r}


def test_bonferroni():
    assert bonferroni([0.01, 0.03, 0.5]) == [(0.03, True), (0.09, False), (1.0, False)]
