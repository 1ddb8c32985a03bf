import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopres.gridworld import AppleRemoval, encode_state, preset, reset
from coopres.reward_models import (
    N_FEATURES,
    RewardModel,
    ShapeError,
    features_handcrafted,
    handcrafted_linear,
    init_model,
    mlp,
    normalize,
    reward,
    reward_gradient,
    state_linear,
    trajectory_return,
)
from coopres.trajectory import simulate, uniform_policy
from oracles import mlp_forward

CFG = preset("8x8", horizon=300)


@pytest.fixture(scope="module")
def states():
    traj = simulate(CFG, uniform_policy, 3, (AppleRemoval(0.7, 120),))
    return [traj.state(t) for t in range(0, traj.n_steps + 1, 6)]


def _feature_oracle(s):
    cfg = s.config
    sites = [c for tree in cfg.trees for c in tree.cells]
    live = [c for c in sites if s.apples[c]]
    diam = cfg.height - 1 + cfg.width - 1
    pos = [tuple(p) for p in s.agent_positions]
    n = len(pos)
    f1 = len(live) / len(sites)
    if live:
        near = [min(abs(r - a) + abs(c - b) for a, b in live) for r, c in pos]
        f2 = 1 - sum(near) / n / diam
        f5 = sum(d == 1 for d in near) / n
    else:
        f2 = f5 = 0.0
    f3 = min(abs(pos[i][0] - pos[j][0]) + abs(pos[i][1] - pos[j][1])
             for i in range(n) for j in range(i + 1, n)) / diam
    e = list(s.eaten)
    tot = sum(e)
    g = sum(abs(a - b) for a in e for b in e) / (2 * n * tot) if tot else 0.0
    delays = [s.t - le if le >= 0 else s.t for le in s.last_eaten]
    f6 = 1 / (1 + sum(delays) / n)
    return [f1, f2, f3, 1 - g, f5, f6]


def test_features_match_oracle_and_range(states):
    for s in states:
        f = features_handcrafted(s)
        assert f.shape == (N_FEATURES,)
        assert ((f >= 0) & (f <= 1)).all()
        assert f == pytest.approx(_feature_oracle(s), abs=1e-12)


def test_feature_examples():
    s = reset(CFG, 0)
    assert features_handcrafted(s)[0] == 1.0
    empty = replace(s, apples=np.zeros_like(s.apples))
    f = features_handcrafted(empty)
    assert f[0] == 0.0 and f[1] == 0.0 and f[4] == 0.0
    far = replace(s, agent_positions=np.array([[0, 0], [7, 7]]))
    assert features_handcrafted(far)[2] == 1.0


def test_trajectory_inputs_agree_with_per_state(states):
    traj = simulate(CFG, uniform_policy, 11)
    m = handcrafted_linear(np.arange(1, 7) / 7, 0.3)
    X = m.trajectory_inputs(traj)
    for t in (0, 17, traj.n_steps):
        assert X[t] == pytest.approx(features_handcrafted(traj.state(t)), abs=1e-12)
    lin = state_linear(CFG)
    assert np.array_equal(lin.trajectory_inputs(traj)[9], encode_state(traj.state(9)))


def test_reward_examples(states):
    zero = handcrafted_linear()
    basis = handcrafted_linear(np.eye(N_FEATURES)[0])
    for s in states[:5]:
        assert reward(zero, s) == 0.0
        assert reward(basis, s) == pytest.approx(features_handcrafted(s)[0])


def test_mlp_matches_forward_oracle(states):
    m = mlp(CFG, seed=4)
    rng = np.random.default_rng(0)
    m = m.with_theta(rng.normal(0, 0.3, m.theta.shape))
    sizes = (CFG.encoding_size, 32, 32, 1)
    for s in states[:4]:
        x = encode_state(s)
        assert reward(m, s) == pytest.approx(mlp_forward(list(m.theta), sizes, list(x)), abs=1e-10)


def test_linear_gradient_is_input_and_one(states):
    m = handcrafted_linear(np.ones(N_FEATURES), 2.0)
    for s in states[:5]:
        g = reward_gradient(m, s)
        assert g[-1] == 1.0
        assert np.array_equal(g[:-1], features_handcrafted(s))


def _fd_check(m, s, rng, n_coords=None):
    g = reward_gradient(m, s)
    idx = np.arange(len(m.theta)) if n_coords is None else rng.choice(len(m.theta), n_coords, replace=False)
    h = 1e-5
    num = np.empty(len(idx))
    for k, i in enumerate(idx):
        tp, tm = m.theta.copy(), m.theta.copy()
        tp[i] += h
        tm[i] -= h
        num[k] = (reward(m.with_theta(tp), s) - reward(m.with_theta(tm), s)) / (2 * h)
    err = np.linalg.norm(g[idx] - num) / max(np.linalg.norm(num), np.linalg.norm(g[idx]), 1e-8)
    return err


@pytest.mark.parametrize("kind", ["handcrafted", "state_linear", "mlp"])
def test_gradient_matches_finite_differences(kind, states):
    rng = np.random.default_rng(1)
    base = init_model(kind, CFG, seed=2)
    for draw in range(50):
        m = base.with_theta(rng.normal(0, 0.5, base.theta.shape))
        m = replace(m, shift=float(rng.normal()), scale=float(rng.uniform(0.5, 2)))
        s = states[draw % len(states)]
        assert _fd_check(m, s, rng, None if kind == "handcrafted" else 40) < 1e-4


def test_trajectory_return_examples():
    traj = simulate(CFG, uniform_policy, 5)
    assert trajectory_return(handcrafted_linear(), traj) == 0.0
    assert trajectory_return(handcrafted_linear(b=0.25), traj) == pytest.approx(0.25 * (traj.n_steps + 1))
    m = mlp(CFG, seed=1)
    manual = sum(reward(m, traj.state(t)) for t in range(traj.n_steps + 1))
    assert trajectory_return(m, traj) == pytest.approx(manual, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6), kind=st.sampled_from(["handcrafted", "state_linear"]))
def test_return_linear_in_parameters(seed, kind):
    rng = np.random.default_rng(seed)
    traj = simulate(CFG, uniform_policy, seed % 50)
    base = init_model(kind, CFG)
    t1, t2 = rng.normal(size=base.theta.shape), rng.normal(size=base.theta.shape)
    r = lambda th: trajectory_return(base.with_theta(th), traj)
    assert r(t1 + t2) == pytest.approx(r(t1) + r(t2) - r(np.zeros_like(t1)), rel=1e-9, abs=1e-9)


def test_normalize(states):
    m = handcrafted_linear(np.array([3.0, -1, 2, 0.5, 1, 4]), 7.0)
    nm = normalize(m, states)
    out = np.array([reward(nm, s) for s in states])
    assert abs(out.mean()) < 1e-10 and abs(out.std() - 1) < 1e-10
    const = normalize(handcrafted_linear(b=2.5), states)
    assert const.shift == 2.5 and const.scale == 1.0
    assert reward(const, states[0]) == 0.0
    again = normalize(nm.with_theta(nm.theta), np.stack([nm.inputs(s) for s in states]))
    assert again.shift == pytest.approx(nm.shift) and again.scale == pytest.approx(nm.scale)
    with pytest.raises(ValueError):
        normalize(m, states[:1])


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-50, 50), scale=st.floats(0.01, 100), seed=st.integers(0, 999))
def test_affine_normalization_preserves_preferences(shift, scale, seed):
    rng = np.random.default_rng(seed)
    m = handcrafted_linear(rng.normal(size=N_FEATURES), rng.normal())
    a, b = (simulate(CFG, uniform_policy, s) for s in rng.integers(0, 40, 2))
    # compare per-state mean return so differing lengths do not mix in the shift
    d0 = trajectory_return(m, a) / (a.n_steps + 1) - trajectory_return(m, b) / (b.n_steps + 1)
    n = replace(m, shift=shift, scale=scale)
    d1 = trajectory_return(n, a) / (a.n_steps + 1) - trajectory_return(n, b) / (b.n_steps + 1)
    assert d1 == pytest.approx(d0 / scale, rel=1e-6, abs=1e-9)


def test_shape_errors():
    m = handcrafted_linear()
    with pytest.raises(ShapeError):
        m(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        RewardModel("handcrafted", np.zeros(3), N_FEATURES, "handcrafted/v1")
    big = preset("16x16")
    with pytest.raises(ShapeError):
        state_linear(CFG).inputs(reset(big, 0))


def test_json_roundtrip(tmp_path):
    m = replace(mlp(CFG, seed=3), shift=0.5, scale=2.0)
    p = tmp_path / "m.json"
    m.save(p)
    back = RewardModel.load(p)
    assert np.array_equal(back.theta, m.theta) and back.hidden == (32, 32)
    assert (back.shift, back.scale, back.schema) == (0.5, 2.0, m.schema)
    d = json.loads(p.read_text())
    d["format"] = "nope"
    with pytest.raises(ValueError):
        RewardModel.from_json(d)
