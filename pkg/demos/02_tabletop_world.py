"""
The tabletop world and its scripted expert
==========================================

A gripper moves over a few coloured objects and three zones. Instructions
are three tokens long ("grasp colour2", "place colour0 zone1", ...). The
expert takes long strides while far from its goal and short ones near it;
those near-goal steps are the hard ones for a learned policy.
"""
import numpy as np

from exitpolicy import env as E

rng = np.random.default_rng(3)
chain, episodes = E.sample_chain(rng, "A")

print("five subtasks:", [i.describe() for i in chain.instructions])
print("tokens of the first:", chain.instructions[0].tokens)

# %%
# Each demonstration step stores the observation tokens (one per object,
# gripper and zone, padded to a fixed count) and the expert's action.
ep = episodes[0]
print(f"episode of {len(ep)} steps, observation shape {ep.obs.shape}")
strides = np.linalg.norm(ep.pose[:, :2], axis=1)
print("stride per step:", np.round(strides, 3))

# %%
# The expert solves held-out chains; a random controller does not.
chains = E.eval_chains(50, seed=1)
print("expert avg successful length:", E.evaluate_chains(E.ExpertPolicy(), chains).avg_len)
print("random avg successful length:", E.evaluate_chains(E.RandomPolicy(0), chains).avg_len)

# %%
# A dataset is many single-instruction episodes drawn from task chains.
data, manifest = E.generate_dataset(E.DatasetConfig(n_episodes=200, splits="ABC"), seed=0)
print({k: manifest[k] for k in ("n_episodes", "mean_len")})
