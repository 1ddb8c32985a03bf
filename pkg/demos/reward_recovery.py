"""Rank random episodes by a hidden linear reward and check that both losses recover it."""

import numpy as np

from coopres.gridworld import AppleRemoval, preset
from coopres.preference_learning import FitConfig, PreferenceData, fit
from coopres.resilience import rank
from coopres.reward_models import handcrafted_linear
from coopres.training import collect_random_trajectories

trajs = collect_random_trajectories(preset("8x8"), 200, 300, [AppleRemoval(0.5, 150)], seed=0)
hidden = handcrafted_linear(np.array([1.0, -0.5, 0.8, 0.3, -0.7, 0.6]))
data = PreferenceData.build(handcrafted_linear(), trajs)
ranked = rank(list(zip(trajs, data.returns(hidden))))

for variant in ("mpl-fixed-random", "ppl-random"):
    rep = fit(handcrafted_linear(), ranked, data, FitConfig.from_name(variant, epochs=200))
    print(f"{variant:<18} held-out accuracy {rep.heldout_accuracy:.3f}")
