"""Score one random-agent episode on the small map and print the per-indicator breakdown."""

from coopres.gridworld import AppleRemoval, preset
from coopres.resilience import build_baseline, score_trajectory, windows_from_schedule
from coopres.training import collect_random_trajectories

cfg = preset("8x8")
schedule = [AppleRemoval(0.5, 500)]
baseline = build_baseline(collect_random_trajectories(cfg, 20, 1000, seed=1))
episode = collect_random_trajectories(cfg, 1, 1000, schedule, seed=2)[0]
br = score_trajectory(episode, baseline, windows_from_schedule(schedule, 1000))

print(f"episode length {episode.n_steps}, last apple eaten: {episode.last_apple_eaten}")
for name, rho_k in br.rho_k.items():
    print(f"  {name:<16} {rho_k:.3f}")
print(f"rho = {br.rho:.3f}")
