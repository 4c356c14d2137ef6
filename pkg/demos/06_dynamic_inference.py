"""
Deciding depth per step
=======================

With a trained checkpoint, calibrate thresholds for half of the full-depth
cost and compare the dynamic policy with fixed-depth ones. Pass the
checkpoint written by ``04_training.py`` (or by ``exitpolicy train``).
"""
import sys

from exitpolicy import budget as bud
from exitpolicy import env as E
from exitpolicy import experiments as X
from exitpolicy.net import load_checkpoint
from exitpolicy.policy import Criterion

path = sys.argv[1] if len(sys.argv) > 1 else "demo_run/final.json"
net, _ = load_checkpoint(path)
cost = bud.build_cost_model(net.config)
N = cost.n_exits

calib, _ = E.generate_dataset(E.DatasetConfig(n_episodes=100), seed=99)
chains = E.eval_chains(100, seed=7)

# %%
# Three ways to spend the same budget: action consistency between exits,
# feature similarity between exits, and a depth that grows with time.
rows = []
for kind in ("action", "feature", "time"):
    cal = X.calibrate(net, calib, kind, 0.5 * cost.flops[-1])
    metrics, _ = X.evaluate(net, cal.criterion, chains, cal.n_cap, label=kind)
    rows.append(metrics)
for k in (1, N):
    rows.append(X.evaluate(net, Criterion.static(k), chains, k, label=f"static-{k}")[0])

print(X.markdown_report(rows))

# %%
# Where the action-consistency policy stops, by step within a subtask.
dyn = rows[0]
for row in dyn["exit_by_phase"]:
    print(row)
