"""
From a compute budget to exit thresholds
========================================

Given the cumulative cost of each exit and an average per-step budget, pick
geometric exit shares whose expected cost equals the budget. Then, on
calibration data, choose thresholds so that each exit takes its share.
"""
import numpy as np

from exitpolicy import budget as bud

cost = bud.CostModel(flops=(10, 20, 30, 40), mem=(1, 2, 3, 4))
for frac in (0.3, 0.5, 0.7):
    alloc = bud.solve_allocation(cost, frac * cost.flops[-1])
    print(f"budget {frac:.0%} of full depth: q={alloc.q:.4f} shares={np.round(alloc.proportions, 3)} "
          f"expected cost {alloc.expected_cost(cost.flops):.2f}")

# %%
# Once the budget reaches the uniform mix's cost, more budget changes nothing.
# A peak-FLOPs or memory limit caps the deepest usable exit first.
print("cap with peak 25:", bud.cap_exit(cost, peak_flops=25))
try:
    bud.solve_allocation(cost, 5)
except bud.InfeasibleBudgetError as e:
    print("too tight:", e)

# %%
# Thresholds from scores. Scores here are synthetic: distance between the
# actions of consecutive exits, smaller meaning "already settled".
rng = np.random.default_rng(0)
scores = rng.gamma(2.0, 0.05, size=(1000, 4)) * np.array([1.0, 0.7, 0.5, 0.4])
alloc = bud.solve_allocation(cost, 0.5 * cost.flops[-1])
eta = bud.fit_thresholds(alloc.proportions, scores).eta
exits = bud.replay_exits(eta, scores)
print("thresholds:", np.round(eta, 4))
print("target shares:", np.round(alloc.proportions, 3))
print("replayed shares:", np.bincount(exits, minlength=5)[1:] / len(exits))
