"""
Training every exit at once
===========================

Each training window picks exits at random: one stream draws a fresh exit at
every step, the other switches once. Both feed the same head, so it learns to
read features of any depth. Auxiliary heads at every exit push each group to
be useful by itself. This run is small (a couple of minutes on one core).
"""
import sys
from pathlib import Path

from exitpolicy import env as E
from exitpolicy.net import NetConfig
from exitpolicy.training import TrainConfig, split_train_val, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")

episodes, _ = E.generate_dataset(E.DatasetConfig(n_episodes=400), seed=0)
train_eps, val_eps = split_train_val(episodes, 0.1, seed=0)

net_cfg = NetConfig(d_model=32, lstm_hidden=64, mlp_hidden=64)
cfg = TrainConfig(epochs_joint=2, epochs_posttrain=1, steps_per_epoch=60, batch_size=16)
result = train(cfg, train_eps, net_cfg, out_dir=out, val_episodes=val_eps)

# %%
# Validation loss per exit after every epoch. The last epoch only updates the head.
for k, row in enumerate(result.val_loss):
    print(f"epoch {k}:", " ".join(f"{v:.4f}" for v in row))
print("checkpoint:", out / "final.json")
