"""
Searching thresholds by interaction
===================================

When the environment can be queried, thresholds can be tuned directly for
task success under the budget. A Gaussian-process surrogate and expected
improvement pick the next thresholds to try; infeasible tries are penalised.
First a synthetic objective with a known optimum, then a checkpoint if one
is given.
"""
import math
import sys

import numpy as np

from exitpolicy import online as O

q = O.QuadraticObjective.random(3, seed=0)
res = O.bayes_optimize(q, [0.0] * 3, [1.0] * 3, O.BOConfig(n_evals=40), seed=0)
print(f"optimum {q.optimum:.3f}, found {res.best.f_obj:.3f} after {len(res.history)} evaluations")
print("best so far:", np.round(res.best_so_far[::5], 3))

# %%
if len(sys.argv) > 1:
    from exitpolicy import budget as bud
    from exitpolicy import env as E
    from exitpolicy import experiments as X
    from exitpolicy.net import load_checkpoint

    net, _ = load_checkpoint(sys.argv[1])
    cost = bud.build_cost_model(net.config)
    b = 0.5 * cost.flops[-1]
    calib, _ = E.generate_dataset(E.DatasetConfig(n_episodes=100), seed=99)
    cal = X.calibrate(net, calib, "action", b)
    chains = E.eval_chains(50, seed=11)
    eta, res = O.solve_online(net, chains, bud.BudgetSpec.from_per_step(b), cost, cal.n_cap, cal.scores,
                              O.BOConfig(n_init=4, n_evals=12), seed=0, fallback=cal.eta)
    print("offline:", [float(round(v, 4)) if math.isfinite(v) else None for v in cal.eta])
    print("online: ", [float(round(v, 4)) if math.isfinite(v) else None for v in eta])
