"""Calibration, evaluation and report assembly shared by the CLI and the demos."""
from __future__ import annotations

import csv
import math
import time
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import budget as bud
from .env import Episode, TaskChain, evaluate_chains
from .net import MultiExitNet
from .policy import Criterion, ExitPolicy, collect_calibration_scores
from .seeding import derive_rng

CURVE_FIELDS = ["label", "avg_flops", "peak_flops", "mem", "avg_len"] + [f"succ_{k}" for k in range(1, 6)]
PHASE_BINS = (0, 4, 8, 12, 16, 24, 32, 64)


@dataclass
class Calibration:
    criterion: Criterion
    n_cap: int
    allocation: bud.ExitAllocation
    scores: np.ndarray | None
    eta: np.ndarray  # fitted thresholds on the score scale (inf beyond the cap)

    def threshold_body(self, cost: bud.CostModel) -> dict:
        body = {
            "criterion": self.criterion.kind,
            "eta": [None if math.isinf(v) else float(v) for v in self.eta],
            "n_cap": self.n_cap,
            "cost_model_hash": cost.digest(),
            "proportions": list(self.allocation.proportions),
            "q": self.allocation.q,
        }
        if self.criterion.kind == "time":
            body["schedule"] = list(self.criterion.schedule)
        return body


def calibration_subset(episodes: Sequence[Episode], fraction: float, seed: int) -> list[Episode]:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1:
        return list(episodes)
    k = max(1, int(round(fraction * len(episodes))))
    idx = np.sort(derive_rng(seed, "calib-subset").choice(len(episodes), size=k, replace=False))
    return [episodes[i] for i in idx]


def calibrate(
    net: MultiExitNet,
    episodes: Sequence[Episode],
    kind: str,
    per_step_budget: float,
    peak_flops: float = math.inf,
    mem_bytes: float = math.inf,
) -> Calibration:
    """Offline calibration: allocation from the budget, thresholds from the data."""
    cost = bud.build_cost_model(net.config)
    n = bud.cap_exit(cost, peak_flops, mem_bytes)
    alloc = bud.solve_allocation(cost, per_step_budget, n)
    N = cost.n_exits
    if kind == "time":
        L = max(len(e) for e in episodes)
        counts = [sum(1 for e in episodes if len(e) > t) for t in range(L)]
        sched = bud.time_schedule_for(alloc.proportions, counts, n)
        return Calibration(Criterion.time(sched), n, alloc, None, np.full(N, math.inf))
    if kind not in ("action", "feature"):
        raise ValueError(f"unknown criterion '{kind}'")
    scores = collect_calibration_scores(net, episodes, kind)
    eta = bud.fit_thresholds(alloc.proportions, scores, n).eta
    if kind == "action":
        crit = Criterion.action(eta)
    else:
        crit = Criterion.feature(1.0 - eta)  # score is 1 - cos
    return Calibration(crit, n, alloc, scores, eta)


def criterion_from_body(body: dict) -> tuple[Criterion, int]:
    kind = body["criterion"]
    n_cap = int(body["n_cap"])
    eta = np.array([math.inf if v is None else float(v) for v in body["eta"]])
    if kind == "action":
        return Criterion.action(eta), n_cap
    if kind == "feature":
        return Criterion.feature(1.0 - eta), n_cap
    if kind == "time":
        return Criterion.time(body["schedule"]), n_cap
    if kind == "static":
        return Criterion.static(int(body["static_exit"])), n_cap
    raise ValueError(f"unknown criterion '{kind}'")


def evaluate(
    net: MultiExitNet,
    criterion: Criterion,
    chains: Sequence[TaskChain],
    n_cap: int | None = None,
    label: str = "",
    batch: int | None = None,
) -> tuple[dict, list[list[dict]]]:
    """Roll out every chain; returns (metrics, per-chain step logs)."""
    cost = bud.build_cost_model(net.config)
    n_cap = n_cap or cost.n_exits
    batch = batch or len(chains)
    scores, logs = [], []
    tick = time.perf_counter()
    for lo in range(0, len(chains), batch):
        res = evaluate_chains(ExitPolicy(net, criterion, n_cap), chains[lo : lo + batch])
        scores.append(res.scores)
        logs.extend(res.step_logs)
    wall = time.perf_counter() - tick
    scores = np.concatenate(scores)
    steps = [s for log in logs for s in log]
    flops = np.array([s["flops_backbone"] for s in steps], dtype=np.int64)
    head = np.array([s["flops_head"] for s in steps], dtype=np.int64)
    exits = Counter(s["exit"] for s in steps)
    metrics = {
        "label": label or criterion.kind,
        "criterion": criterion.kind,
        "n_cap": n_cap,
        "n_chains": len(chains),
        "n_steps": len(steps),
        "avg_successful_len": float(scores.mean()),
        "success_rates": [float((scores >= k).mean()) for k in range(1, 6)],
        "avg_flops": float(flops.mean()) if len(flops) else 0.0,
        "peak_flops": int(flops.max()) if len(flops) else 0,
        "avg_head_flops": float(head.mean()) if len(head) else 0.0,
        "mem": int(cost.mem[n_cap - 1]),
        "full_flops": int(cost.flops[-1]),
        "exit_histogram": {str(k): exits.get(k, 0) for k in range(1, cost.n_exits + 1)},
        "exit_by_phase": exit_phase_histogram(steps, cost.n_exits),
        "ns_per_action": float(np.mean([s["ns"] for s in steps])) if steps else 0.0,
        "wall_seconds": wall,
    }
    return metrics, logs


def dataset_exit_fractions(
    net: MultiExitNet, criterion: Criterion, episodes: Sequence[Episode], n_cap: int | None = None
) -> np.ndarray:
    """Share of timesteps leaving at each exit when the policy runs over recorded
    observations (its own head state, the dataset's inputs)."""
    n_cap = n_cap or net.config.n_exits
    policy = ExitPolicy(net, criterion, n_cap)
    policy.start(len(episodes))
    instr = np.array([e.instruction.tokens for e in episodes])
    counts = np.zeros(net.config.n_exits)
    for t in range(max(len(e) for e in episodes)):
        rows = np.array([i for i, e in enumerate(episodes) if t < len(e)])
        obs = np.stack([episodes[i].obs[t] for i in rows])
        _, traces = policy.act(rows, instr[rows], obs, np.full(len(rows), t))
        for tr in traces:
            counts[tr["exit"] - 1] += 1
    return counts / counts.sum()


def exit_phase_histogram(steps: Sequence[dict], n_exits: int) -> list[dict]:
    """Exit counts per bin of within-subtask timestep."""
    rows = []
    for lo, hi in zip(PHASE_BINS, PHASE_BINS[1:]):
        c = Counter(s["exit"] for s in steps if lo <= s["t"] < hi)
        rows.append({"t_lo": lo, "t_hi": hi, **{f"exit_{k}": c.get(k, 0) for k in range(1, n_exits + 1)}})
    return rows


def curve_row(m: dict) -> dict:
    row = {
        "label": m["label"],
        "avg_flops": m["avg_flops"],
        "peak_flops": m["peak_flops"],
        "mem": m["mem"],
        "avg_len": m["avg_successful_len"],
    }
    for k, v in enumerate(m["success_rates"], start=1):
        row[f"succ_{k}"] = v
    return row


def write_curve(metrics: Sequence[dict], path: str | Path) -> list[dict]:
    rows = sorted((curve_row(m) for m in metrics), key=lambda r: (r["avg_flops"], r["label"]))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        w.writerows(rows)
    return rows


def markdown_report(metrics: Sequence[dict]) -> str:
    rows = sorted(metrics, key=lambda m: (m["avg_flops"], m["label"]))
    out = [
        "| label | criterion | avg MFLOPs | peak MFLOPs | mem MB | avg len | " + " | ".join(f"succ {k}" for k in range(1, 6)) + " | us/action |",
        "|" + "---|" * 12,
    ]
    for m in rows:
        out.append(
            f"| {m['label']} | {m['criterion']} | {m['avg_flops'] / 1e6:.3f} | {m['peak_flops'] / 1e6:.3f} | "
            f"{m['mem'] / 1e6:.2f} | {m['avg_successful_len']:.3f} | "
            + " | ".join(f"{v:.3f}" for v in m["success_rates"])
            + f" | {m['ns_per_action'] / 1e3:.1f} |"
        )
    out.append("")
    for m in rows:
        out.append(f"exit histogram by timestep, {m['label']}:")
        out.append("")
        n = len(m["exit_histogram"])
        out.append("| t | " + " | ".join(f"exit {k}" for k in range(1, n + 1)) + " |")
        out.append("|" + "---|" * (n + 1))
        for r in m["exit_by_phase"]:
            out.append(f"| {r['t_lo']}-{r['t_hi'] - 1} | " + " | ".join(str(r[f'exit_{k}']) for k in range(1, n + 1)) + " |")
        out.append("")
    return "\n".join(out)
