import numpy as np
import pytest

from coopres.gridworld import preset
from coopres.trajectory import Trajectory


def make_trajectory(consumed, live=None, horizon=None, n_agents=None, trajectory_id=0, schedule=()):
    """Hand-built 8x8 trajectory from a (T, n) consumption matrix.

    ``live`` gives the live-apple count per state (T+1 entries); apples are
    filled into the tree sites in order. Positions are fixed and irrelevant.
    """
    consumed = np.asarray(consumed, dtype=bool)
    T, n = consumed.shape
    cfg = preset("8x8", n_agents=n_agents or n, horizon=horizon or T)
    sites = [c for tree in cfg.trees for c in tree.cells]
    live = np.full(T + 1, len(sites)) if live is None else np.asarray(live)
    apples = np.zeros((T + 1, cfg.height, cfg.width), dtype=bool)
    for t, k in enumerate(live):
        for r, c in sites[:k]:
            apples[t, r, c] = True
    positions = np.zeros((T + 1, n, 2), dtype=np.int16)
    positions[:, :, 0] = 7
    positions[:, :, 1] = np.arange(n)
    return Trajectory(
        config=cfg,
        positions=positions,
        apples=apples,
        trees_alive=np.ones((T + 1, 1), dtype=bool),
        actions=np.full((T, n), 4, dtype=np.int8),
        consumed=consumed,
        schedule=tuple(schedule),
        seed=0,
        trajectory_id=trajectory_id,
    )


@pytest.fixture
def traj_factory():
    return make_trajectory


# one verdict line per acceptance criterion, printed after the run
_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[key])
