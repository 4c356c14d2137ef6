"""Multi-exit token backbone with a recurrent action head.

The backbone is ``n_exits`` groups of ``blocks_per_exit`` pre-norm
transformer blocks. After each group the token matrix is max-pooled into a
single feature vector, which any of the action heads can consume.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import env as envmod
from . import tensor as T
from .tensor import Tensor

FORMAT_VERSION = 1


@dataclass
class NetConfig:
    n_exits: int = 4
    blocks_per_exit: int = 2
    d_model: int = 64
    mlp_ratio: int = 2
    l_inst: int = envmod.L_INST
    l_obs: int = envmod.L_OBS
    d_raw: int = envmod.D_RAW
    vocab_size: int = envmod.VOCAB_SIZE
    lstm_layers: int = 2
    lstm_hidden: int = 128
    mlp_hidden: int = 128
    aux_heads: bool = True
    freeze_encoder: bool = False
    lstm_dropout: float = 0.3
    mlp_dropout: float = 0.4
    pose_scale: float = envmod.DELTA_MAX  # predicted pose is in units of this

    def __post_init__(self):
        if self.n_exits < 2:
            raise ValueError("n_exits must be >= 2")
        if self.blocks_per_exit < 1:
            raise ValueError("blocks_per_exit must be >= 1")

    @property
    def n_tokens(self) -> int:
        return self.l_inst + self.l_obs

    # matmul FLOPs; a d_in -> d_out map over n tokens costs 2*n*d_in*d_out
    def block_flops(self) -> int:
        n, d = self.n_tokens, self.d_model
        f = self.mlp_ratio * d
        qkvo = 4 * 2 * n * d * d
        attn = 2 * (2 * n * n * d)
        mlp = 2 * n * d * f + 2 * n * f * d
        return qkvo + attn + mlp

    def group_flops(self) -> int:
        return self.blocks_per_exit * self.block_flops()

    def head_flops(self) -> int:
        d, h, m = self.d_model, self.lstm_hidden, self.mlp_hidden
        total = 0
        d_in = d
        for _ in range(self.lstm_layers):
            total += 2 * (d_in + h) * 4 * h
            d_in = h
        total += 2 * h * m + 2 * m * 6
        total += 2 * h * m + 2 * m * 1
        return total

    def block_params(self) -> int:
        d = self.d_model
        f = self.mlp_ratio * d
        return 4 * d * d + 4 * d + d * f + f + f * d + d


@dataclass
class ExitCache:
    """Token states and pooled features for exits computed so far.

    ``token_states[i]`` / ``pooled[i]`` hold exit ``i`` (index 0 is the input
    to the first group). ``flops`` counts backbone FLOPs spent per row.
    """

    token_states: list[Tensor]
    pooled: list[Tensor]
    flops: np.ndarray

    @property
    def computed_up_to(self) -> int:
        return len(self.token_states) - 1

    @property
    def pooled_input(self) -> Tensor:
        return self.pooled[0]

    @property
    def batch(self) -> int:
        return self.token_states[0].shape[0]

    def select(self, rows) -> "ExitCache":
        with T.no_grad():
            return ExitCache(
                token_states=[Tensor(x.data[rows]) for x in self.token_states],
                pooled=[Tensor(p.data[rows]) for p in self.pooled],
                flops=self.flops[rows].copy(),
            )


@dataclass
class HeadState:
    layers: list[tuple[Tensor, Tensor]]

    @classmethod
    def zeros(cls, cfg: NetConfig, batch: int, dtype=np.float64) -> "HeadState":
        z = lambda: Tensor(np.zeros((batch, cfg.lstm_hidden), dtype=dtype))
        return cls([(z(), z()) for _ in range(cfg.lstm_layers)])

    @property
    def batch(self) -> int:
        return self.layers[0][0].shape[0]

    def select(self, rows) -> "HeadState":
        with T.no_grad():
            return HeadState([(Tensor(h.data[rows]), Tensor(c.data[rows])) for h, c in self.layers])

    def detach(self) -> "HeadState":
        return HeadState([(h.detach(), c.detach()) for h, c in self.layers])

    def scatter(self, rows, other: "HeadState") -> None:
        """Overwrite ``rows`` with the rows of ``other`` (in place, no graph)."""
        for (h, c), (h2, c2) in zip(self.layers, other.layers):
            h.data[rows] = h2.data
            c.data[rows] = c2.data

    def mask(self, keep: np.ndarray) -> "HeadState":
        """Zero the rows where ``keep`` is 0 (differentiable)."""
        k = keep.reshape(-1, 1).astype(self.layers[0][0].dtype)
        return HeadState([(T.mul(h, k), T.mul(c, k)) for h, c in self.layers])

    def equals(self, other: "HeadState") -> bool:
        return all(
            np.array_equal(h.data, h2.data) and np.array_equal(c.data, c2.data)
            for (h, c), (h2, c2) in zip(self.layers, other.layers)
        )


@dataclass
class ActionPrediction:
    pose: Tensor  # (B, 6)
    gripper_logit: Tensor  # (B, 1)

    @property
    def gripper_prob(self) -> np.ndarray:
        return T._sigmoid_np(self.gripper_logit.data)

    @property
    def consistency_vector(self) -> np.ndarray:
        """(B, 7): pose followed by gripper probability."""
        return np.concatenate([self.pose.data, self.gripper_prob], axis=-1)

    def select(self, rows) -> "ActionPrediction":
        with T.no_grad():
            return ActionPrediction(Tensor(self.pose.data[rows]), Tensor(self.gripper_logit.data[rows]))

    def to_actions(self, pose_scale: float = 1.0) -> list[envmod.Action7]:
        grip = (self.gripper_logit.data[:, 0] > 0).astype(int)
        pose = self.pose.data.astype(np.float64) * pose_scale
        return [envmod.Action7(pose=p, gripper=int(g)) for p, g in zip(pose, grip)]


class MultiExitNet:
    def __init__(self, config: NetConfig, seed: int = 0, dtype=np.float64):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        self._build(rng, dtype)

    # ------------------------------------------------------------------ params
    def _add(self, name: str, arr: np.ndarray, dtype) -> None:
        self.params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    def _build(self, rng: np.random.Generator, dtype) -> None:
        c = self.config
        d = c.d_model
        f = c.mlp_ratio * d

        def w(n_in, n_out):
            return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))

        self._add("enc.embed", rng.normal(0.0, 1.0, size=(c.vocab_size, d)), dtype)
        self._add("enc.obs_w", w(c.d_raw, d), dtype)
        self._add("enc.obs_b", np.zeros(d), dtype)
        for g in range(1, c.n_exits + 1):
            for b in range(c.blocks_per_exit):
                p = f"g{g}.b{b}."
                self._add(p + "ln1.g", np.ones(d), dtype)
                self._add(p + "ln1.b", np.zeros(d), dtype)
                for m in ("wq", "wk", "wv"):
                    self._add(p + m, w(d, d), dtype)
                # residual branches start small so deep stacks stay well scaled
                self._add(p + "wo", w(d, d) / math.sqrt(2 * c.blocks_per_exit * c.n_exits), dtype)
                self._add(p + "ln2.g", np.ones(d), dtype)
                self._add(p + "ln2.b", np.zeros(d), dtype)
                self._add(p + "w1", w(d, f), dtype)
                self._add(p + "b1", np.zeros(f), dtype)
                self._add(p + "w2", w(f, d) / math.sqrt(2 * c.blocks_per_exit * c.n_exits), dtype)
                self._add(p + "b2", np.zeros(d), dtype)
        self._build_head("head.", rng, dtype)
        if c.aux_heads:
            for j in range(1, c.n_exits + 1):
                self._build_head(f"aux{j}.", rng, dtype)

    def _build_head(self, prefix: str, rng, dtype) -> None:
        c = self.config
        d, h, m = c.d_model, c.lstm_hidden, c.mlp_hidden
        self._add(prefix + "in_ln.g", np.ones(d), dtype)
        self._add(prefix + "in_ln.b", np.zeros(d), dtype)
        d_in = d
        for l in range(c.lstm_layers):
            wt = rng.normal(0.0, 1.0 / math.sqrt(d_in + h), size=(d_in + h, 4 * h))
            bias = np.zeros(4 * h)
            bias[h : 2 * h] = 1.0  # forget gate
            self._add(f"{prefix}lstm{l}.w", wt, dtype)
            self._add(f"{prefix}lstm{l}.b", bias, dtype)
            d_in = h
        for name, out in (("pose", 6), ("grip", 1)):
            self._add(f"{prefix}{name}.w1", rng.normal(0.0, 1.0 / math.sqrt(h), size=(h, m)), dtype)
            self._add(f"{prefix}{name}.b1", np.zeros(m), dtype)
            self._add(f"{prefix}{name}.ln.g", np.ones(m), dtype)
            self._add(f"{prefix}{name}.ln.b", np.zeros(m), dtype)
            self._add(f"{prefix}{name}.w2", rng.normal(0.0, 0.1 / math.sqrt(m), size=(m, out)), dtype)
            self._add(f"{prefix}{name}.b2", np.zeros(out), dtype)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            if name.startswith(prefix):
                yield name, p

    def param_group(self, kind: str) -> list[str]:
        """Names in one partition: 'encoder', 'backbone', 'head', 'aux' or 'g<i>'."""
        if kind == "encoder":
            return [n for n in self.params if n.startswith("enc.")]
        if kind == "backbone":
            return [n for n in self.params if n.startswith("g")]
        if kind == "head":
            return [n for n in self.params if n.startswith("head.")]
        if kind == "aux":
            return [n for n in self.params if n.startswith("aux")]
        if kind.startswith("g"):
            return [n for n in self.params if n.startswith(kind + ".")]
        raise ValueError(f"unknown parameter group '{kind}'")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "MultiExitNet":
        out = MultiExitNet.__new__(MultiExitNet)
        out.config = self.config
        out.seed = self.seed
        out.params = {
            n: Tensor(p.data.astype(dtype), requires_grad=True, name=n) for n, p in self.params.items()
        }
        return out

    def copy(self) -> "MultiExitNet":
        return self.astype(self.dtype)

    # ----------------------------------------------------------------- forward
    def encode(self, instr_tokens: np.ndarray, obs: np.ndarray) -> Tensor:
        """(B, L_inst) token ids and (B, L_obs, d_raw) floats -> (B, n_tokens, d)."""
        c = self.config
        P = self.params
        instr_tokens = np.asarray(instr_tokens)
        obs = np.asarray(obs, dtype=self.dtype)
        if instr_tokens.shape[-1] != c.l_inst or obs.shape[-2:] != (c.l_obs, c.d_raw):
            raise ValueError(
                f"encode: expected instr (B,{c.l_inst}) and obs (B,{c.l_obs},{c.d_raw}), "
                f"got {instr_tokens.shape} and {obs.shape}"
            )
        if instr_tokens.size and instr_tokens.max() >= c.vocab_size:
            raise IndexError(f"encode: token id {instr_tokens.max()} outside vocabulary of {c.vocab_size}")
        emb, ow, ob = P["enc.embed"], P["enc.obs_w"], P["enc.obs_b"]
        if c.freeze_encoder:
            emb, ow, ob = emb.detach(), ow.detach(), ob.detach()
        words = T.embedding(emb, instr_tokens)
        things = T.add(T.matmul(Tensor(obs), ow), ob)
        return T.concat([words, things], axis=-2)

    def block(self, x: Tensor, group: int, b: int) -> Tensor:
        P = self.params
        p = f"g{group}.b{b}."
        d = self.config.d_model
        h = T.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q = T.matmul(h, P[p + "wq"])
        k = T.matmul(h, P[p + "wk"])
        v = T.matmul(h, P[p + "wv"])
        scores = T.mul(T.matmul(q, T.swap_last(k)), 1.0 / math.sqrt(d))
        att = T.matmul(T.softmax(scores), v)
        x = T.add(x, T.matmul(att, P[p + "wo"]))
        h = T.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = T.relu(T.add(T.matmul(h, P[p + "w1"]), P[p + "b1"]))
        return T.add(x, T.add(T.matmul(h, P[p + "w2"]), P[p + "b2"]))

    def group(self, x: Tensor, group: int) -> Tensor:
        for b in range(self.config.blocks_per_exit):
            x = self.block(x, group, b)
        return x

    def start_cache(self, instr_tokens, obs) -> ExitCache:
        x = self.encode(instr_tokens, obs)
        return ExitCache([x], [T.max_pool(x, axis=-2)], np.zeros(x.shape[0], dtype=np.int64))

    def forward_to_exit(self, cache: ExitCache, target: int) -> ExitCache:
        """Run groups ``computed_up_to+1 .. target`` in place. Lower targets are a no-op."""
        n = self.config.n_exits
        if not 1 <= target <= n:
            raise ValueError(f"target exit {target} outside [1, {n}]")
        cost = self.config.group_flops()
        for i in range(cache.computed_up_to + 1, target + 1):
            x = self.group(cache.token_states[-1], i)
            cache.token_states.append(x)
            cache.pooled.append(T.max_pool(x, axis=-2))
            cache.flops += cost
        return cache

    def head_forward(
        self,
        pooled: Tensor,
        state: HeadState,
        head: str = "head",
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[ActionPrediction, HeadState]:
        """One recurrent step of an action head. ``state`` is left untouched."""
        c = self.config
        P = self.params
        if head != "head" and not c.aux_heads:
            raise RuntimeError("auxiliary heads are disabled in this network")
        if len(state.layers) != c.lstm_layers:
            raise ValueError(f"head state has {len(state.layers)} layers, config says {c.lstm_layers}")
        if pooled.shape[-1] != c.d_model:
            raise ValueError(f"head_forward: feature width {pooled.shape[-1]} != d_model {c.d_model}")
        pre = head + "."
        x = T.layer_norm(pooled, P[pre + "in_ln.g"], P[pre + "in_ln.b"])
        new_layers = []
        for l, (h0, c0) in enumerate(state.layers):
            h, cc = T.lstm_cell(x, h0, c0, P[f"{pre}lstm{l}.w"], P[f"{pre}lstm{l}.b"])
            new_layers.append((h, cc))
            x = _dropout(h, c.lstm_dropout, train, rng)
        outs = []
        for name in ("pose", "grip"):
            z = T.add(T.matmul(x, P[f"{pre}{name}.w1"]), P[f"{pre}{name}.b1"])
            z = T.relu(T.layer_norm(z, P[f"{pre}{name}.ln.g"], P[f"{pre}{name}.ln.b"]))
            z = _dropout(z, c.mlp_dropout, train, rng)
            outs.append(T.add(T.matmul(z, P[f"{pre}{name}.w2"]), P[f"{pre}{name}.b2"]))
        return ActionPrediction(outs[0], outs[1]), HeadState(new_layers)

    def aux_head_forward(self, exit_index: int, pooled: Tensor, state: HeadState, train=False, rng=None):
        if not self.config.aux_heads:
            raise RuntimeError("auxiliary heads are disabled in this network")
        if not 1 <= exit_index <= self.config.n_exits:
            raise ValueError(f"exit index {exit_index} outside [1, {self.config.n_exits}]")
        return self.head_forward(pooled, state, head=f"aux{exit_index}", train=train, rng=rng)

    def init_state(self, batch: int) -> HeadState:
        return HeadState.zeros(self.config, batch, self.dtype)

    # -------------------------------------------------------------- checkpoint
    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(sd)
        if missing:
            raise KeyError(f"checkpoint parameter mismatch: {sorted(missing)[:5]}")
        for n, p in self.params.items():
            arr = np.asarray(sd[n], dtype=p.dtype).reshape(p.shape)
            p.data = arr.copy()


def _dropout(x: Tensor, p: float, train: bool, rng) -> Tensor:
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout at train time needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return T.mul(x, keep)


# ---------------------------------------------------------------------------
# checkpoint file


def save_checkpoint(net: MultiExitNet, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": FORMAT_VERSION,
        "net_config": asdict(net.config),
        "rng_seed": int(net.seed),
        "params": {
            n: {"shape": list(p.shape), "data": p.data.astype(np.float64).ravel().tolist()}
            for n, p in net.params.items()
        },
    }
    if extra:
        doc["extra"] = extra
    path.write_text(json.dumps(doc, separators=(",", ":")))
    return path


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[MultiExitNet, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')}")
    cfg = NetConfig(**doc["net_config"])
    net = MultiExitNet.__new__(MultiExitNet)
    net.config = cfg
    net.seed = doc["rng_seed"]
    net.params = {
        n: Tensor(np.array(v["data"], dtype=dtype).reshape(v["shape"]), requires_grad=True, name=n)
        for n, v in doc["params"].items()
    }
    return net, doc.get("extra", {})
