"""
A backbone you can stop early
=============================

The network encodes instruction and observation tokens, runs them through
groups of transformer blocks, and exposes a pooled feature after every group.
One recurrent head turns any of those features into an action. Going deeper
from a partly computed cache reuses the work already done.
"""
import numpy as np

from exitpolicy import budget as bud
from exitpolicy import env as E
from exitpolicy.net import MultiExitNet, NetConfig

net = MultiExitNet(NetConfig(), seed=0)
cost = bud.build_cost_model(net.config)
print("cumulative backbone MFLOPs per exit:", [round(c / 1e6, 3) for c in cost.flops])
print("float32 parameter MB needed per exit:", [round(m / 1e6, 2) for m in cost.mem])

# %%
# Run to exit 1, look at the action there, then continue to exit 3.
chain, _ = E.sample_chain(np.random.default_rng(0), "D")
instr = np.array([chain.instructions[0].tokens])
obs = E.observe(chain.initial)[None]

cache = net.start_cache(instr, obs)
net.forward_to_exit(cache, 1)
state = net.init_state(1)
pred, _ = net.head_forward(cache.pooled[1], state)
print("exit 1 consistency vector:", np.round(pred.consistency_vector[0], 3))
net.forward_to_exit(cache, 3)
print("computed up to exit", cache.computed_up_to)

# %%
# The incremental path matches a fresh forward to the same depth.
fresh = net.start_cache(instr, obs)
net.forward_to_exit(fresh, 3)
print("max difference:", np.abs(fresh.token_states[3].data - cache.token_states[3].data).max())

# %%
# Published per-layer figures can drive the same cost model: 1.3 GFLOPs and
# 0.5 GB per layer, an exit every two layers.
table = bud.table_cost_model(1.3, 2, n_exits=6, layer_mem_gb=0.5)
print("GFLOPs per exit:", table.gflops())
print("24 layers:", bud.table_total_flops(1.3, 24) / 1e9, "GFLOPs")
