"""Cost model, exit allocation under a compute budget, and threshold fitting."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .net import NetConfig
from .policy import ThresholdVector

GIGA = 10**9
FLOAT32_BYTES = 4


class InfeasibleBudgetError(ValueError):
    """The constraints cannot be met by any exit configuration."""


@dataclass(frozen=True)
class CostModel:
    """Cumulative backbone FLOPs and resident memory (bytes) per exit.

    Both are integers so that per-step accounting can be compared exactly.
    """

    flops: tuple[int, ...]
    mem: tuple[int, ...]
    head_flops: int = 0

    def __post_init__(self):
        if len(self.flops) == 0 or len(self.flops) != len(self.mem):
            raise ValueError("flops and mem must be non-empty and of equal length")
        if any(b <= a for a, b in zip(self.flops, self.flops[1:])):
            raise ValueError("cumulative FLOPs must be strictly increasing")
        if any(b < a for a, b in zip(self.mem, self.mem[1:])):
            raise ValueError("memory must be non-decreasing")

    @property
    def n_exits(self) -> int:
        return len(self.flops)

    def C(self, i: int) -> int:
        return self.flops[i - 1]

    def gflops(self) -> list[float]:
        return [f / GIGA for f in self.flops]

    def digest(self) -> str:
        blob = json.dumps({"flops": self.flops, "mem": self.mem, "head": self.head_flops}).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"flops": list(self.flops), "mem": list(self.mem), "head_flops": self.head_flops}

    @classmethod
    def from_json(cls, d: dict) -> "CostModel":
        return cls(tuple(d["flops"]), tuple(d["mem"]), d.get("head_flops", 0))


def build_cost_model(config: NetConfig) -> CostModel:
    """Analytic mode: count matmul FLOPs of every block; memory is the float32
    size of the encoder, the groups up to the exit, and the main head."""
    g = config.group_flops()
    n = config.n_exits
    enc = (config.vocab_size + config.d_raw + 1) * config.d_model
    head = _head_params(config)
    per_group = config.block_params() * config.blocks_per_exit
    flops = tuple(g * i for i in range(1, n + 1))
    mem = tuple(FLOAT32_BYTES * (enc + head + per_group * i) for i in range(1, n + 1))
    return CostModel(flops, mem, config.head_flops())


def _head_params(c: NetConfig) -> int:
    d, h = c.d_model, c.lstm_hidden
    total = 2 * d
    d_in = d
    for _ in range(c.lstm_layers):
        total += (d_in + h) * 4 * h + 4 * h
        d_in = h
    for out in (6, 1):
        total += h * c.mlp_hidden + c.mlp_hidden + 2 * c.mlp_hidden + c.mlp_hidden * out + out
    return total


def table_cost_model(
    layer_gflops: Sequence[float] | float,
    layers_per_exit: int,
    n_exits: int | None = None,
    layer_mem_gb: Sequence[float] | float = 0.0,
) -> CostModel:
    """Table mode: published per-layer figures, exits every ``layers_per_exit`` layers.

    Work is done in integer FLOPs / bytes, which keeps sums like 12 x 1.3e9
    exact.
    """
    if np.isscalar(layer_gflops):
        if n_exits is None:
            raise ValueError("n_exits is required with a scalar per-layer cost")
        layer_gflops = [float(layer_gflops)] * (n_exits * layers_per_exit)
    layers = [int(round(g * GIGA)) for g in layer_gflops]
    if any(v <= 0 for v in layers):
        raise ValueError("per-layer FLOPs must be positive")
    if np.isscalar(layer_mem_gb):
        layer_mem_gb = [float(layer_mem_gb)] * len(layers)
    mems = [int(round(m * GIGA)) for m in layer_mem_gb]
    if len(mems) != len(layers) or any(m < 0 for m in mems):
        raise ValueError("per-layer memory must be non-negative and match the layer count")
    n = len(layers) // layers_per_exit if n_exits is None else n_exits
    if n * layers_per_exit > len(layers):
        raise ValueError("table has fewer layers than the requested exits")
    cf = np.cumsum(layers, dtype=np.int64)
    cm = np.cumsum(mems, dtype=np.int64)
    idx = [layers_per_exit * i - 1 for i in range(1, n + 1)]
    return CostModel(tuple(int(cf[j]) for j in idx), tuple(int(cm[j]) for j in idx))


def table_total_flops(layer_gflops: float, n_layers: int) -> int:
    return n_layers * int(round(layer_gflops * GIGA))


# ---------------------------------------------------------------------------
# allocation


@dataclass(frozen=True)
class BudgetSpec:
    """Total task-suite budget ``total_flops`` over ``n_tasks`` tasks of mean length ``mean_len``."""

    total_flops: float
    peak_flops: float = math.inf
    mem_bytes: float = math.inf
    n_tasks: int = 1
    mean_len: float = 1.0

    def __post_init__(self):
        for name in ("total_flops", "peak_flops", "mem_bytes", "n_tasks", "mean_len"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def per_step(self) -> float:
        return self.total_flops / (self.n_tasks * self.mean_len)

    @classmethod
    def from_per_step(cls, per_step: float, peak_flops=math.inf, mem_bytes=math.inf) -> "BudgetSpec":
        return cls(total_flops=per_step, peak_flops=peak_flops, mem_bytes=mem_bytes)


@dataclass(frozen=True)
class ExitAllocation:
    q: float
    proportions: tuple[float, ...]  # length N; zeros beyond n
    n: int

    @property
    def z(self) -> float:
        return self.proportions[0] / self.q

    def expected_cost(self, costs: Sequence[float]) -> float:
        return float(np.dot(self.proportions[: self.n], np.asarray(costs[: self.n], dtype=float)))


def cap_exit(model: CostModel, peak_flops: float = math.inf, mem_bytes: float = math.inf) -> int:
    if not (peak_flops > 0 and mem_bytes > 0):
        raise ValueError("constraints must be positive")
    if model.flops[0] > peak_flops:
        raise InfeasibleBudgetError(
            f"peak FLOPs {peak_flops:.6g} is below the first exit's cost C_1 = {model.flops[0]}"
        )
    if model.mem[0] > mem_bytes:
        raise InfeasibleBudgetError(f"memory cap {mem_bytes:.6g} is below the first exit's {model.mem[0]} bytes")
    n = 0
    for i, (f, m) in enumerate(zip(model.flops, model.mem), start=1):
        if f <= peak_flops and m <= mem_bytes:
            n = i
        else:
            break
    return n


def geometric_proportions(q: float, n: int, n_total: int | None = None) -> np.ndarray:
    """q_i proportional to q**i for i <= n, normalised; computed in log space."""
    i = np.arange(1, n + 1, dtype=float)
    logw = i * math.log(q)
    w = np.exp(logw - logw.max())
    p = w / w.sum()
    out = np.zeros(n_total or n)
    out[:n] = p
    return out


def expected_cost(q: float, costs: Sequence[float], n: int) -> float:
    return float(np.dot(geometric_proportions(q, n), np.asarray(costs[:n], dtype=float)))


def solve_allocation(model: CostModel, per_step_budget: float, n: int | None = None) -> ExitAllocation:
    """Pick the geometric ratio whose expected per-step cost equals the budget
    (or q = 1 when even the uniform mix fits)."""
    N = model.n_exits
    n = N if n is None else n
    if not 1 <= n <= N:
        raise ValueError(f"cap {n} outside [1, {N}]")
    costs = np.asarray(model.flops, dtype=float)
    if per_step_budget < costs[0]:
        raise InfeasibleBudgetError(
            f"per-step budget {per_step_budget:.6g} is below minimum C_1 = {model.flops[0]}"
        )
    if n == 1:
        return ExitAllocation(1.0, tuple(geometric_proportions(1.0, 1, N)), 1)
    g1 = expected_cost(1.0, costs, n)
    if per_step_budget >= g1:
        return ExitAllocation(1.0, tuple(geometric_proportions(1.0, n, N)), n)
    tol = 1e-9 * costs[n - 1]
    f = lambda q: expected_cost(q, costs, n) - per_step_budget
    lo = 1e-12
    if f(lo) >= 0:  # budget at (numerically) C_1
        q = lo
    else:
        q = _bisect(f, lo, 1.0, tol)
    return ExitAllocation(q, tuple(geometric_proportions(q, n, N)), n)


def _bisect(f, lo: float, hi: float, tol: float) -> float:
    flo = f(lo)
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if abs(fm) <= tol:
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# threshold fitting


def fit_thresholds(proportions: Sequence[float], scores: np.ndarray, n: int | None = None) -> ThresholdVector:
    """Sequential quantile fit: at exit i the k_i = round(q_i * S) smallest
    scores among still-active samples exit, with the threshold placed halfway
    to the next order statistic. ``scores`` is (S, N)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be (samples, exits)")
    S, N = scores.shape
    n = N if n is None else n
    p = np.asarray(proportions, dtype=float)
    eta = np.full(N, math.inf)
    active = np.ones(S, dtype=bool)
    for i in range(n - 1):
        k = int(round(p[i] * S))
        idx = np.flatnonzero(active)
        if k <= 0:
            eta[i] = 0.0
            continue
        if k >= len(idx):
            eta[i] = math.inf
            active[:] = False
            continue
        vals = scores[idx, i]
        order = np.argsort(vals, kind="stable")
        a, b = vals[order[k - 1]], vals[order[k]]
        eta[i] = 0.5 * (a + b)
        active[idx[vals < eta[i]]] = False
    return ThresholdVector(eta)


def replay_exits(eta: Sequence[float], scores: np.ndarray, n: int | None = None) -> np.ndarray:
    """Exit index each calibration sample takes under the strict-< rule."""
    scores = np.asarray(scores, dtype=np.float64)
    S, N = scores.shape
    n = N if n is None else n
    exits = np.full(S, n, dtype=np.int64)
    active = np.ones(S, dtype=bool)
    for i in range(n - 1):
        fire = active & (scores[:, i] < eta[i])
        exits[fire] = i + 1
        active &= ~fire
    return exits


def write_scores_csv(scores: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "exit", "delta"])
        for s, row in enumerate(scores):
            for i, v in enumerate(row, start=1):
                w.writerow([s, i, repr(float(v))])


def read_scores_csv(path: str | Path) -> np.ndarray:
    rows = {}
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            rows.setdefault(int(rec["sample_id"]), {})[int(rec["exit"])] = float(rec["delta"])
    if not rows:
        raise ValueError(f"{path}: no calibration scores")
    N = max(max(r) for r in rows.values())
    return np.array([[rows[s][i] for i in range(1, N + 1)] for s in sorted(rows)])


def write_thresholds(path, criterion: str, eta: Sequence[float], n_cap: int, model: CostModel, **extra) -> dict:
    body = {
        "criterion": criterion,
        "eta": [None if math.isinf(v) else float(v) for v in eta],
        "n_cap": int(n_cap),
        "cost_model_hash": model.digest(),
    }
    body.update(extra)
    Path(path).write_text(json.dumps(body, indent=2))
    return body


def read_thresholds(path) -> dict:
    body = json.loads(Path(path).read_text())
    body["eta"] = [math.inf if v is None else float(v) for v in body["eta"]]
    return body


# ---------------------------------------------------------------------------
# constraint checks


@dataclass
class ConstraintReport:
    n_steps: int
    total_flops: int
    avg_flops: float
    peak_flops: int
    mem: int
    head_flops: int
    avg_ok: bool
    peak_ok: bool
    mem_ok: bool

    @property
    def ok(self) -> bool:
        return self.avg_ok and self.peak_ok and self.mem_ok

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["ok"] = self.ok
        return d


def verify_constraints(
    step_logs: Iterable[Iterable[dict]], budget: BudgetSpec, model: CostModel, n_cap: int
) -> ConstraintReport:
    """Backbone FLOPs against the per-step and peak budgets; memory is whatever
    the loaded cap needs, regardless of the exits actually taken."""
    flops = [int(s["flops_backbone"]) for log in step_logs for s in log]
    head = [int(s.get("flops_head", 0)) for log in step_logs for s in log] if flops else []
    if not flops:
        flops, head = [0], [0]
    total = int(sum(flops))
    avg = total / len(flops)
    peak = int(max(flops))
    mem = int(model.mem[n_cap - 1])
    return ConstraintReport(
        n_steps=len(flops),
        total_flops=total,
        avg_flops=avg,
        peak_flops=peak,
        mem=mem,
        head_flops=int(sum(head)),
        avg_ok=avg <= budget.per_step,
        peak_ok=peak <= budget.peak_flops,
        mem_ok=mem <= budget.mem_bytes,
    )


def time_schedule_for(proportions: Sequence[float], step_counts: Sequence[int], n: int) -> list[int]:
    """Non-decreasing timestep -> exit table whose share of steps per exit
    follows ``proportions`` given how many steps occur at each t."""
    counts = np.asarray(step_counts, dtype=float)
    mid = (np.cumsum(counts) - 0.5 * counts) / counts.sum()
    bounds = np.cumsum(proportions[:n])
    sched = [min(int(np.searchsorted(bounds, m, side="left")) + 1, n) for m in mid]
    return list(np.maximum.accumulate(sched)) if sched else [n]
