"""Adaptive exit selection at inference time.

Each control step probes exits in increasing order and stops at the first one
the criterion accepts. Work is batched across independent episodes, but the
decision is made per row: rows that stop early drop out of the batch before
the next group runs.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .env import Action7, Episode, Instruction, TaskState, WorldState, observe, step, T_MAX
from .net import ActionPrediction, ExitCache, HeadState, MultiExitNet
from .tensor import Tensor

INF = math.inf
CRITERIA = ("action", "feature", "time", "static")


@dataclass
class ThresholdVector:
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)
        if self.eta.ndim != 1 or len(self.eta) < 1:
            raise ValueError("thresholds must be a non-empty vector")
        if not math.isinf(self.eta[-1]):
            raise ValueError("the last threshold must be +inf")
        if np.any(self.eta[:-1] < 0):
            raise ValueError("thresholds must be non-negative")

    @classmethod
    def from_list(cls, values: Sequence[float | None]) -> "ThresholdVector":
        return cls(np.array([INF if v is None else v for v in values], dtype=np.float64))

    def to_list(self) -> list[float | None]:
        # JSON has no infinity; null stands in for it
        return [None if math.isinf(v) else float(v) for v in self.eta]

    def __len__(self) -> int:
        return len(self.eta)


@dataclass
class Criterion:
    """Which exit rule to apply and its parameters.

    ``thresholds`` are eta for 'action' and cosine thresholds for 'feature';
    ``schedule[t]`` is the exit for step t under 'time' (the last entry
    repeats); ``static_exit`` fixes the depth.
    """

    kind: str
    thresholds: np.ndarray | None = None
    schedule: tuple[int, ...] | None = None
    static_exit: int | None = None

    def __post_init__(self):
        if self.kind not in CRITERIA:
            raise ValueError(f"unknown criterion '{self.kind}'")
        if self.kind == "time" and self.schedule is not None:
            if any(b < a for a, b in zip(self.schedule, self.schedule[1:])):
                raise ValueError("time schedule must be non-decreasing")

    @classmethod
    def action(cls, eta) -> "Criterion":
        eta = eta.eta if isinstance(eta, ThresholdVector) else ThresholdVector(eta).eta
        return cls("action", thresholds=eta)

    @classmethod
    def feature(cls, sims) -> "Criterion":
        return cls("feature", thresholds=np.asarray(sims, dtype=np.float64))

    @classmethod
    def time(cls, schedule: Sequence[int]) -> "Criterion":
        return cls("time", schedule=tuple(int(s) for s in schedule))

    @classmethod
    def static(cls, k: int) -> "Criterion":
        return cls("static", static_exit=int(k))


@dataclass
class Decision:
    """Batched outcome of one control step."""

    exits: np.ndarray  # (B,)
    prediction: ActionPrediction
    state: HeadState  # committed
    flops_backbone: np.ndarray  # (B,)
    head_probes: np.ndarray  # (B,)
    deltas: list[list[float]]


class _Collector:
    def __init__(self, net: MultiExitNet, state: HeadState):
        B = state.batch
        c = net.config
        dt = net.dtype
        self.exits = np.zeros(B, dtype=np.int64)
        self.pose = np.zeros((B, 6), dtype=dt)
        self.logit = np.zeros((B, 1), dtype=dt)
        self.layers = [(np.zeros((B, c.lstm_hidden), dt), np.zeros((B, c.lstm_hidden), dt)) for _ in state.layers]
        self.flops = np.zeros(B, dtype=np.int64)
        self.probes = np.zeros(B, dtype=np.int64)
        self.deltas: list[list[float]] = [[] for _ in range(B)]

    def commit(self, rows, mask, exit_index, pred: ActionPrediction, cand: HeadState, flops):
        r = rows[mask]
        self.exits[r] = exit_index
        self.pose[r] = pred.pose.data[mask]
        self.logit[r] = pred.gripper_logit.data[mask]
        for (h, c), (h2, c2) in zip(self.layers, cand.layers):
            h[r] = h2.data[mask]
            c[r] = c2.data[mask]
        self.flops[r] = flops[mask]

    def result(self) -> Decision:
        return Decision(
            exits=self.exits,
            prediction=ActionPrediction(Tensor(self.pose), Tensor(self.logit)),
            state=HeadState([(Tensor(h), Tensor(c)) for h, c in self.layers]),
            flops_backbone=self.flops,
            head_probes=self.probes,
            deltas=self.deltas,
        )


def _check(cache: ExitCache, n_cap: int, net: MultiExitNet) -> None:
    if cache is None or not cache.token_states:
        raise ValueError("empty exit cache")
    if not 1 <= n_cap <= net.config.n_exits:
        raise ValueError(f"n_cap {n_cap} outside [1, {net.config.n_exits}]")


def decide_exit_action_consistency(
    net: MultiExitNet, cache: ExitCache, state: HeadState, eta, n_cap: int
) -> Decision:
    """Stop at the smallest i whose action differs from exit i-1's by less than
    eta_i (L2 over pose + gripper probability); exit ``n_cap`` always accepts.

    Every probe uses the same pre-step head state, and the committed state is
    the candidate already produced by the accepted probe.
    """
    _check(cache, n_cap, net)
    eta = np.asarray(eta.eta if isinstance(eta, ThresholdVector) else eta, dtype=np.float64)
    out = _Collector(net, state)
    rows = np.arange(cache.batch)
    sub, st = cache, state
    with T.no_grad():
        prev = None
        if n_cap > 1:
            prev = net.head_forward(cache.pooled_input, state)[0].consistency_vector
            out.probes += 1
        for i in range(1, n_cap + 1):
            net.forward_to_exit(sub, i)
            pred, cand = net.head_forward(sub.pooled[i], st)
            out.probes[rows] += 1
            if i == n_cap:
                fire = np.ones(len(rows), dtype=bool)
                if prev is not None:
                    d = np.linalg.norm(pred.consistency_vector - prev, axis=-1)
                    for r, v in zip(rows, d):
                        out.deltas[r].append(float(v))
            else:
                d = np.linalg.norm(pred.consistency_vector - prev, axis=-1)
                for r, v in zip(rows, d):
                    out.deltas[r].append(float(v))
                fire = d < eta[i - 1]
            out.commit(rows, fire, i, pred, cand, sub.flops)
            keep = ~fire
            if not keep.any():
                break
            rows = rows[keep]
            prev = pred.consistency_vector[keep]
            sub, st = sub.select(keep), st.select(keep)
    return out.result()


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    safe = np.where(denom > 0, denom, 1.0)
    # rounding can push |cos| past 1, which would beat a threshold of exactly 1
    return np.where(denom > 0, np.clip((a * b).sum(axis=-1) / safe, -1.0, 1.0), 0.0)


def _run_to_targets(net, cache: ExitCache, state: HeadState, targets_fn, n_cap: int) -> Decision:
    """Shared driver for criteria that evaluate the head only at the chosen exit.

    ``targets_fn(i, sub, prev_pooled)`` returns a boolean per active row
    saying whether row stops at exit i.
    """
    out = _Collector(net, state)
    rows = np.arange(cache.batch)
    sub, st = cache, state
    with T.no_grad():
        prev = cache.pooled_input.data
        for i in range(1, n_cap + 1):
            net.forward_to_exit(sub, i)
            fire = np.ones(len(rows), bool) if i == n_cap else targets_fn(i, rows, sub, prev, out)
            if fire.any():
                idx = np.flatnonzero(fire)
                pred, cand = net.head_forward(Tensor(sub.pooled[i].data[idx]), st.select(idx))
                out.probes[rows[idx]] += 1
                full_pred = ActionPrediction(_spread(pred.pose, fire), _spread(pred.gripper_logit, fire))
                full_cand = HeadState([(_spread(h, fire), _spread(c, fire)) for h, c in cand.layers])
                out.commit(rows, fire, i, full_pred, full_cand, sub.flops)
            keep = ~fire
            if not keep.any():
                break
            rows = rows[keep]
            prev = sub.pooled[i].data[keep]
            sub, st = sub.select(keep), st.select(keep)
    return out.result()


def _spread(x: Tensor, mask: np.ndarray) -> Tensor:
    full = np.zeros((len(mask),) + x.shape[1:], dtype=x.dtype)
    full[mask] = x.data
    return Tensor(full)


def decide_exit_feature_similarity(
    net: MultiExitNet, cache: ExitCache, state: HeadState, sims, n_cap: int
) -> Decision:
    """Stop at the smallest i with cos(pooled_i, pooled_{i-1}) > sims[i-1].
    A zero feature vector has similarity 0."""
    _check(cache, n_cap, net)
    sims = np.asarray(sims, dtype=np.float64)

    def fire(i, rows, sub, prev, out):
        cos = _cosine(sub.pooled[i].data, prev)
        for r, v in zip(rows, cos):
            out.deltas[r].append(float(v))
        return cos > sims[i - 1]

    return _run_to_targets(net, cache, state, fire, n_cap)


def time_schedule_exit(t: int, schedule: Sequence[int], n_cap: int) -> int:
    return int(min(schedule[min(t, len(schedule) - 1)], n_cap))


def decide_exit_time_progressive(
    net: MultiExitNet, cache: ExitCache, state: HeadState, t: np.ndarray, schedule, n_cap: int
) -> Decision:
    _check(cache, n_cap, net)
    targets = np.array([time_schedule_exit(int(ti), schedule, n_cap) for ti in np.atleast_1d(t)])
    return _decide_fixed(net, cache, state, targets, n_cap)


def _decide_fixed(net, cache, state, targets: np.ndarray, n_cap: int) -> Decision:
    tgt = {"v": targets}

    def fire(i, rows, sub, prev, out):
        return tgt["v"][rows] == i

    return _run_to_targets(net, cache, state, fire, int(min(n_cap, targets.max())))


def decide(net, cache, state, criterion: Criterion, n_cap: int, t=None) -> Decision:
    if criterion.kind == "action":
        return decide_exit_action_consistency(net, cache, state, criterion.thresholds, n_cap)
    if criterion.kind == "feature":
        return decide_exit_feature_similarity(net, cache, state, criterion.thresholds, n_cap)
    if criterion.kind == "time":
        return decide_exit_time_progressive(net, cache, state, t, criterion.schedule, n_cap)
    k = min(criterion.static_exit, n_cap)
    return _decide_fixed(net, cache, state, np.full(cache.batch, k), n_cap)


# ---------------------------------------------------------------------------
# rollouts


class ExitPolicy:
    """Closed-loop controller for ``env.evaluate_chains`` (one head state per row)."""

    needs_state = False

    def __init__(self, net: MultiExitNet, criterion: Criterion, n_cap: int | None = None):
        self.net = net
        self.criterion = criterion
        self.n_cap = n_cap or net.config.n_exits
        self.head_cost = net.config.head_flops()
        self.state: HeadState | None = None

    def start(self, batch: int) -> None:
        self.state = self.net.init_state(batch)

    def reset(self, rows: np.ndarray) -> None:
        for h, c in self.state.layers:
            h.data[rows] = 0.0
            c.data[rows] = 0.0

    def act(self, rows, instr_tokens, obs, t):
        tick = time.perf_counter_ns()
        with T.no_grad():
            cache = self.net.start_cache(instr_tokens, obs)
            st = self.state.select(rows)
            dec = decide(self.net, cache, st, self.criterion, self.n_cap, t=t)
        self.state.scatter(rows, dec.state)
        ns = (time.perf_counter_ns() - tick) // max(len(rows), 1)
        actions = dec.prediction.to_actions(self.net.config.pose_scale)
        traces = []
        for k in range(len(rows)):
            traces.append(
                {
                    "t": int(t[k]),
                    "exit": int(dec.exits[k]),
                    "flops_backbone": int(dec.flops_backbone[k]),
                    "flops_head": int(dec.head_probes[k]) * self.head_cost,
                    "delta": dec.deltas[k],
                    "action": {"pose": actions[k].pose.tolist(), "grip": actions[k].gripper},
                    "ns": int(ns),
                }
            )
        return actions, traces


@dataclass
class EpisodeLog:
    steps: list[dict]
    success: bool

    @property
    def exits(self) -> list[int]:
        return [s["exit"] for s in self.steps]

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for s in self.steps:
                fh.write(json.dumps(s) + "\n")


def run_episodes(
    net: MultiExitNet,
    worlds: Sequence[WorldState],
    instructions: Sequence[Instruction],
    criterion: Criterion,
    n_cap: int | None = None,
    t_max: int = T_MAX,
) -> list[EpisodeLog]:
    """Roll out single-instruction episodes in lock-step, head state zeroed at start."""
    policy = ExitPolicy(net, criterion, n_cap)
    B = len(worlds)
    policy.start(B)
    states = [w.copy() for w in worlds]
    tasks = [TaskState.begin(s, i) for s, i in zip(states, instructions)]
    logs = [EpisodeLog([], False) for _ in range(B)]
    alive = np.ones(B, dtype=bool)
    t = np.zeros(B, dtype=np.int64)
    while alive.any():
        rows = np.flatnonzero(alive)
        instr = np.array([tasks[r].instruction.tokens for r in rows])
        obs = np.stack([observe(states[r]) for r in rows])
        actions, traces = policy.act(rows, instr, obs, t[rows])
        for k, r in enumerate(rows):
            states[r], done, _ = step(states[r], actions[k], tasks[r])
            logs[r].steps.append(traces[k])
            t[r] += 1
            if done:
                logs[r].success = True
                alive[r] = False
            elif t[r] >= t_max:
                alive[r] = False
    return logs


def run_episode(net, world: WorldState, instruction: Instruction, criterion: Criterion, n_cap=None) -> EpisodeLog:
    return run_episodes(net, [world], [instruction], criterion, n_cap)[0]


# ---------------------------------------------------------------------------
# calibration data


def collect_calibration_scores(
    net: MultiExitNet, episodes: Sequence[Episode], kind: str = "action", chunk: int = 128
) -> np.ndarray:
    """Per-timestep scores at every exit, shape (S, N), with no early exit.

    'action': L2 distance between consecutive exits' action vectors, all
    probes sharing the head state of the full-depth stream.
    'feature': 1 - cosine(pooled_i, pooled_{i-1}), so a smaller score means
    "more similar" and both criteria fire on ``score < threshold``.
    """
    N = net.config.n_exits
    rows_out: list[np.ndarray] = []
    with T.no_grad():
        for lo in range(0, len(episodes), chunk):
            group = episodes[lo : lo + chunk]
            L = max(len(e) for e in group)
            state = net.init_state(len(group))
            instr = np.array([e.instruction.tokens for e in group])
            per_t = []
            for t in range(L):
                live = np.array([t < len(e) for e in group])
                idx = np.flatnonzero(live)
                obs = np.stack([group[i].obs[t] for i in idx])
                cache = net.start_cache(instr[idx], obs)
                net.forward_to_exit(cache, N)
                st = state.select(idx)
                scores = np.zeros((len(idx), N))
                if kind == "action":
                    prev = net.head_forward(cache.pooled_input, st)[0].consistency_vector
                    for i in range(1, N + 1):
                        pred, cand = net.head_forward(cache.pooled[i], st)
                        vec = pred.consistency_vector
                        scores[:, i - 1] = np.linalg.norm(vec - prev, axis=-1)
                        prev = vec
                    state.scatter(idx, cand)
                elif kind == "feature":
                    for i in range(1, N + 1):
                        scores[:, i - 1] = 1.0 - _cosine(cache.pooled[i].data, cache.pooled[i - 1].data)
                    _, cand = net.head_forward(cache.pooled[N], st)
                    state.scatter(idx, cand)
                else:
                    raise ValueError(f"no calibration scores for criterion '{kind}'")
                per_t.append(scores)
            rows_out.extend(per_t)
    return np.concatenate(rows_out, axis=0)
