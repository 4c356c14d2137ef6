"""Imitation learning with randomly sampled exits.

Each training window is run through the head twice: once with a fresh
uniform exit per step (s1) and once with a two-segment piecewise-constant
exit schedule (s2). Optional auxiliary heads, one per exit, see every exit at
every step.
"""
from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .env import Episode
from .net import ActionPrediction, HeadState, MultiExitNet, NetConfig, load_checkpoint, save_checkpoint
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "phase", "step", "loss_total", "loss_seq", "loss_aux", "grad_norm"]


@dataclass
class TrainConfig:
    H: int = 12
    lam: float = 0.01
    batch_size: int = 32
    lr_backbone: float = 1e-3
    lr_head: float = 1e-3
    epochs_joint: int = 4
    epochs_posttrain: int = 1
    steps_per_epoch: int | None = 150  # None: one pass worth of windows
    aux_enabled: bool = True
    seed: int = 0
    weight_decay: float = 0.0
    clip_norm: float = 1.0
    warmup_steps: int = 0
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


# ---------------------------------------------------------------------------
# exit samplers


def sample_s1(H: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Independent uniform exit per step."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return rng.integers(1, N + 1, size=H)


def sample_s2(H: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Two segments split after a uniform index, each with one uniform exit.

    A split at H-1 leaves the second segment empty.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    i = int(rng.integers(0, H))
    e1, e2 = rng.integers(1, N + 1, size=2)
    return s2_sequence(H, i, int(e1), int(e2))


def s2_sequence(H: int, split: int, e1: int, e2: int) -> np.ndarray:
    out = np.empty(H, dtype=np.int64)
    out[: split + 1] = e1
    out[split + 1 :] = e2
    return out


# ---------------------------------------------------------------------------
# losses


def single_action_loss(pred: ActionPrediction, pose: np.ndarray, grip: np.ndarray, lam: float) -> Tensor:
    """Per-row loss: mean squared pose error over 6 dims + lam * gripper BCE."""
    pose = np.asarray(pose, dtype=pred.pose.dtype)
    grip = np.asarray(grip, dtype=pred.pose.dtype).reshape(-1, 1)
    mse = T.mean(T.square(T.sub(pred.pose, pose)), axis=-1)
    bce = T.sum_(T.bce_with_logits(pred.gripper_logit, grip), axis=-1)
    return T.add(mse, T.mul(bce, lam))


@dataclass
class WindowBatch:
    """Right-padded clips; ``mask`` marks real steps, which always form a prefix."""

    instr: np.ndarray  # (B, L_inst)
    obs: np.ndarray  # (B, H, L_obs, d_raw)
    pose: np.ndarray  # (B, H, 6)
    grip: np.ndarray  # (B, H)
    mask: np.ndarray  # (B, H)
    exits_s1: np.ndarray  # (B, H)
    exits_s2: np.ndarray  # (B, H)

    @property
    def size(self) -> int:
        return len(self.instr)

    @property
    def H(self) -> int:
        return self.mask.shape[1]

    def subset(self, rows) -> "WindowBatch":
        return WindowBatch(**{k: v[rows] for k, v in asdict_shallow(self).items()})


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


@dataclass
class LossParts:
    total: Tensor
    seq: Tensor
    aux: Tensor
    n_seq_terms: int = 0
    n_aux_terms: int = 0


@contextlib.contextmanager
def _term(name: str):
    try:
        yield
    except T.NonFiniteError as e:
        e.term = e.term or name
        raise


def _features_for(pooled: list[Tensor], exits: np.ndarray) -> Tensor:
    """Pick ``pooled[e]`` per (row, step): sum of one-hot masked exits."""
    feat = None
    for e in np.unique(exits):
        sel = (exits == e).astype(pooled[e].dtype)[..., None]
        term = T.mul(pooled[e], sel)
        feat = term if feat is None else T.add(feat, term)
    return feat


def _stream_loss(net, feats: Tensor, batch: WindowBatch, lam, head, train, rng, steps) -> tuple[Tensor, int]:
    B = batch.size
    state = HeadState.zeros(net.config, B, net.dtype)
    total = None
    n = 0
    for t in range(steps):
        pred, state = net.head_forward(feats[:, t], state, head=head, train=train, rng=rng)
        ell = single_action_loss(pred, batch.pose[:, t], batch.grip[:, t], lam)
        ell = T.sum_(T.mul(ell, batch.mask[:, t].astype(ell.dtype)))
        total = ell if total is None else T.add(total, ell)
        n += 1
    return total, n


def backbone_features(net: MultiExitNet, batch: WindowBatch, upto: int) -> list[Tensor]:
    """Pooled features (B, H, d) for exits 0..upto, computing only real frames."""
    B, H = batch.mask.shape
    flat_mask = batch.mask.reshape(-1) > 0
    real = np.flatnonzero(flat_mask)
    obs = batch.obs.reshape(B * H, *batch.obs.shape[2:])[real]
    instr = np.repeat(batch.instr, H, axis=0)[real]
    cache = net.start_cache(instr, obs)
    net.forward_to_exit(cache, upto)
    where = np.zeros(B * H, dtype=np.int64)
    where[real] = np.arange(len(real))
    out = []
    for p in cache.pooled:
        full = T.slice_(p, where) if len(real) != B * H or not np.array_equal(where, np.arange(B * H)) else p
        out.append(T.reshape(full, (B, H, p.shape[-1])))
    return out


def window_loss(
    net: MultiExitNet,
    batch: WindowBatch,
    lam: float = 0.01,
    aux: bool = True,
    train: bool = False,
    rng: np.random.Generator | None = None,
    seq: bool = True,
) -> LossParts:
    """Sequence loss over both sampling strategies, plus auxiliary-head loss.

    Per-window sums are averaged over the batch. The backbone runs once per
    frame up to the deepest exit any consumer needs.
    """
    N = net.config.n_exits
    for e in (batch.exits_s1, batch.exits_s2):
        if e.min() < 1 or e.max() > N:
            raise ValueError(f"exit index outside [1, {N}]")
    use_aux = aux and net.config.aux_heads
    need = N if use_aux else int(max(batch.exits_s1.max(), batch.exits_s2.max()))
    with _term("backbone"):
        pooled = backbone_features(net, batch, need)
    steps = int(batch.mask.sum(axis=1).max())
    B = batch.size
    zero = Tensor(np.zeros((), dtype=net.dtype))
    seq_loss, n_seq = zero, 0
    if seq:
        parts = []
        for exits in (batch.exits_s1, batch.exits_s2):
            with _term("seq"):
                feats = _features_for(pooled, exits)
                loss, n = _stream_loss(net, feats, batch, lam, "head", train, rng, steps)
            parts.append(loss)
            n_seq += batch.H  # masked steps count as zero-valued terms
        seq_loss = T.add(parts[0], parts[1])
    aux_loss, n_aux = zero, 0
    if use_aux:
        for j in range(1, N + 1):
            with _term("aux"):
                loss, n = _stream_loss(net, pooled[j], batch, lam, f"aux{j}", train, rng, steps)
            aux_loss = T.add(aux_loss, loss)
            n_aux += batch.H
    total = T.mul(T.add(seq_loss, aux_loss), 1.0 / B)
    return LossParts(total, T.mul(seq_loss, 1.0 / B), T.mul(aux_loss, 1.0 / B), n_seq, n_aux)


def aux_loss(net: MultiExitNet, batch: WindowBatch, lam: float = 0.01) -> Tensor:
    if not net.config.aux_heads:
        raise RuntimeError("auxiliary heads are disabled")
    return window_loss(net, batch, lam, aux=True, seq=False).aux


# ---------------------------------------------------------------------------
# data


@dataclass
class EpisodeArrays:
    instr: np.ndarray  # (E, L_inst)
    obs: list[np.ndarray]
    pose: list[np.ndarray]
    grip: list[np.ndarray]

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], pose_scale: float = 1.0) -> "EpisodeArrays":
        """``pose_scale`` divides the pose targets (the net predicts normalised moves)."""
        if not episodes:
            raise ValueError("dataset is empty")
        return cls(
            instr=np.array([e.instruction.tokens for e in episodes], dtype=np.int64),
            obs=[e.obs for e in episodes],
            pose=[e.pose / pose_scale for e in episodes],
            grip=[e.grip for e in episodes],
        )

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(g) for g in self.grip])


def sample_windows(data: EpisodeArrays, B: int, H: int, N: int, rng: np.random.Generator) -> WindowBatch:
    """Clips of up to H steps; the start offset may hang off the front, in which
    case the clip begins at step 0 (fresh recurrent state, as at inference)."""
    lengths = data.lengths
    weights = lengths + H - 1
    eps = rng.choice(len(data), size=B, p=weights / weights.sum())
    L_obs, d_raw = data.obs[0].shape[1:]
    obs = np.zeros((B, H, L_obs, d_raw))
    pose = np.zeros((B, H, 6))
    grip = np.zeros((B, H))
    mask = np.zeros((B, H))
    for b, e in enumerate(eps):
        s = int(rng.integers(-(H - 1), lengths[e]))
        lo, hi = max(s, 0), min(s + H, lengths[e])
        k = hi - lo
        obs[b, :k] = data.obs[e][lo:hi]
        pose[b, :k] = data.pose[e][lo:hi]
        grip[b, :k] = data.grip[e][lo:hi]
        mask[b, :k] = 1.0
    s1 = np.stack([sample_s1(H, N, rng) for _ in range(B)])
    s2 = np.stack([sample_s2(H, N, rng) for _ in range(B)])
    return WindowBatch(data.instr[eps], obs, pose, grip, mask, s1, s2)


def episode_batch(data: EpisodeArrays, idx: Sequence[int], N: int, exit_index: int = 1) -> WindowBatch:
    """Whole episodes as right-padded clips with a constant exit."""
    idx = list(idx)
    H = int(max(data.lengths[i] for i in idx))
    L_obs, d_raw = data.obs[0].shape[1:]
    B = len(idx)
    obs = np.zeros((B, H, L_obs, d_raw))
    pose = np.zeros((B, H, 6))
    grip = np.zeros((B, H))
    mask = np.zeros((B, H))
    for b, e in enumerate(idx):
        k = len(data.grip[e])
        obs[b, :k], pose[b, :k], grip[b, :k], mask[b, :k] = data.obs[e], data.pose[e], data.grip[e], 1.0
    ex = np.full((B, H), exit_index, dtype=np.int64)
    return WindowBatch(data.instr[idx], obs, pose, grip, mask, ex, ex.copy())


def validation_loss_per_exit(net: MultiExitNet, data: EpisodeArrays, lam: float, chunk: int = 64) -> list[float]:
    """Mean single-action loss per real step, main head fed one fixed exit for
    the whole episode."""
    N = net.config.n_exits
    sums = np.zeros(N)
    steps = 0.0
    with T.no_grad():
        for lo in range(0, len(data), chunk):
            idx = range(lo, min(lo + chunk, len(data)))
            batch = episode_batch(data, idx, N)
            pooled = backbone_features(net, batch, N)
            steps += batch.mask.sum()
            for i in range(1, N + 1):
                loss, _ = _stream_loss(net, pooled[i], batch, lam, "head", False, None, batch.H)
                sums[i - 1] += float(loss.data)
    return list(sums / steps)


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    net: MultiExitNet
    log_rows: list[dict] = field(default_factory=list)
    val_loss: list[list[float]] = field(default_factory=list)  # per epoch, per exit


def split_train_val(episodes: Sequence[Episode], frac: float, seed: int):
    rng = derive_rng(seed, "val-split")
    idx = rng.permutation(len(episodes))
    n_val = int(round(frac * len(episodes)))
    val = [episodes[i] for i in sorted(idx[:n_val])]
    train = [episodes[i] for i in sorted(idx[n_val:])]
    return train, val


def _trainable(net: MultiExitNet, phase: str, cfg: TrainConfig) -> tuple[list[str], list[float]]:
    names, lrs = [], []
    if phase == "joint":
        for n in net.param_group("encoder"):
            if not net.config.freeze_encoder:
                names.append(n)
                lrs.append(cfg.lr_backbone)
        for n in net.param_group("backbone"):
            names.append(n)
            lrs.append(cfg.lr_backbone)
        groups = ["head"] + (["aux"] if cfg.aux_enabled and net.config.aux_heads else [])
    else:
        groups = ["head"]
    for g in groups:
        for n in net.param_group(g):
            names.append(n)
            lrs.append(cfg.lr_head)
    return names, lrs


def train_step(net, batch, cfg: TrainConfig, phase: str, names, lrs, opt_state, rng, step_index: int) -> dict:
    net.zero_grad()
    try:
        if phase == "joint":
            parts = window_loss(net, batch, cfg.lam, aux=cfg.aux_enabled, train=True, rng=rng)
        else:
            # frozen backbone: no graph below the head
            with T.no_grad(), _term("backbone"):
                pooled = backbone_features(net, batch, net.config.n_exits)
            with _term("seq"):
                parts = _head_only_loss(net, pooled, batch, cfg, rng)
    except T.NonFiniteError as e:
        raise FloatingPointError(
            f"non-finite {e.term or 'loss'} term at step {step_index} ({phase}): op '{e.op}'"
        ) from e
    loss_val = float(parts.total.data)
    for term, t in (("seq", parts.seq), ("aux", parts.aux)):
        if not math.isfinite(float(t.data)):
            raise FloatingPointError(f"non-finite {term} loss at step {step_index} ({phase})")
    T.backward(parts.total)
    params = [net.params[n] for n in names]
    grads = [p.grad for p in params]
    gnorm = T.global_norm(grads)
    if not math.isfinite(gnorm):
        raise FloatingPointError(f"non-finite gradient at step {step_index} ({phase})")
    if cfg.clip_norm and gnorm > cfg.clip_norm:
        scale = cfg.clip_norm / gnorm
        grads = [None if g is None else g * scale for g in grads]
    warm = min(1.0, (step_index + 1) / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    T.adam_step(params, grads, opt_state, [lr * warm for lr in lrs], weight_decay=cfg.weight_decay)
    return {
        "loss_total": loss_val,
        "loss_seq": float(parts.seq.data),
        "loss_aux": float(parts.aux.data),
        "grad_norm": gnorm,
    }


def _head_only_loss(net, pooled, batch, cfg, rng) -> LossParts:
    steps = int(batch.mask.sum(axis=1).max())
    parts = []
    for exits in (batch.exits_s1, batch.exits_s2):
        feats = _features_for([Tensor(p.data) for p in pooled], exits)
        loss, _ = _stream_loss(net, feats, batch, cfg.lam, "head", True, rng, steps)
        parts.append(loss)
    seq = T.mul(T.add(parts[0], parts[1]), 1.0 / batch.size)
    zero = Tensor(np.zeros((), dtype=net.dtype))
    return LossParts(seq, seq, zero, 2 * steps, 0)


def _opt_to_json(state: dict) -> dict:
    if not state:
        return {}
    return {"t": state["t"], "m": [m.ravel().tolist() for m in state["m"]], "v": [v.ravel().tolist() for v in state["v"]]}


def _opt_from_json(doc: dict, params: list[Tensor]) -> dict:
    if not doc:
        return {}
    return {
        "t": int(doc["t"]),
        "m": [np.array(m, dtype=p.dtype).reshape(p.shape) for m, p in zip(doc["m"], params)],
        "v": [np.array(v, dtype=p.dtype).reshape(p.shape) for v, p in zip(doc["v"], params)],
    }


def train(
    cfg: TrainConfig,
    episodes: Sequence[Episode],
    net_cfg: NetConfig | None = None,
    out_dir: str | Path | None = None,
    resume: bool = False,
    val_episodes: Sequence[Episode] | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Two phases: joint backbone + heads, then the main head alone.

    With ``out_dir`` set, writes ``train_log.csv``, ``epoch_<k>.json`` after
    every epoch, ``resume.json`` (weights + optimiser) and ``final.json``.
    ``stop_after_epoch`` simulates an interrupted run.
    """
    if not episodes:
        raise ValueError("dataset is empty")
    net_cfg = net_cfg or NetConfig()
    if not cfg.aux_enabled and net_cfg.aux_heads:
        net_cfg = NetConfig(**{**asdict(net_cfg), "aux_heads": False})
    if val_episodes is None:
        episodes, val_episodes = split_train_val(episodes, cfg.val_fraction, cfg.seed)
    data = EpisodeArrays.from_episodes(episodes, net_cfg.pose_scale)
    val = EpisodeArrays.from_episodes(val_episodes, net_cfg.pose_scale) if val_episodes else None
    net = MultiExitNet(net_cfg, seed=int(derive_rng(cfg.seed, "init").integers(2**31)))
    N = net_cfg.n_exits
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    steps_per_epoch = cfg.steps_per_epoch or max(1, int(data.lengths.sum() // (cfg.batch_size * cfg.H)))
    schedule = [("joint", e) for e in range(cfg.epochs_joint)] + [("post", e) for e in range(cfg.epochs_posttrain)]

    result = TrainResult(net=net)
    done = 0
    opt_state: dict = {}
    opt_phase = None
    if resume and out and (out / "resume.json").exists():
        net, extra = load_checkpoint(out / "resume.json")
        result.net = net
        done = int(extra["epochs_done"])
        result.log_rows = extra.get("log_rows", [])
        result.val_loss = extra.get("val_loss", [])
        phase = schedule[done - 1][0] if done else "joint"
        names, _ = _trainable(net, phase, cfg)
        opt_state = _opt_from_json(extra.get("opt", {}), [net.params[n] for n in names])
        opt_phase = phase

    global_step = len(result.log_rows)
    for k in range(done, len(schedule)):
        phase, epoch = schedule[k]
        names, lrs = _trainable(net, phase, cfg)
        if opt_phase != phase:
            opt_state, opt_phase = {}, phase
        rng = derive_rng(cfg.seed, "train", phase, epoch)
        phase_step = sum(1 for r in result.log_rows if r["phase"] == phase)
        for s in range(steps_per_epoch):
            batch = sample_windows(data, cfg.batch_size, cfg.H, N, rng)
            stats = train_step(net, batch, cfg, phase, names, lrs, opt_state, rng, phase_step)
            phase_step += 1
            row = {"epoch": k, "phase": phase, "step": global_step, **stats}
            result.log_rows.append(row)
            global_step += 1
        if val is not None:
            result.val_loss.append(validation_loss_per_exit(net, val, cfg.lam))
        shown = " ".join(f"{v:.5f}" for v in result.val_loss[-1]) if val else "-"
        log.info("epoch %d (%s) loss %.5f val %s", k, phase, row["loss_total"], shown)
        if out:
            save_checkpoint(net, out / f"epoch_{k}.json", extra={"epoch": k, "phase": phase})
            save_checkpoint(
                net,
                out / "resume.json",
                extra={
                    "epochs_done": k + 1,
                    "opt": _opt_to_json(opt_state),
                    "log_rows": result.log_rows,
                    "val_loss": result.val_loss,
                },
            )
            write_log(result.log_rows, out / "train_log.csv")
        if stop_after_epoch is not None and k + 1 >= stop_after_epoch:
            return result
    if out:
        save_checkpoint(net, out / "final.json", extra={"val_loss": result.val_loss, "train_config": asdict(cfg)})
    return result


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_FIELDS})
