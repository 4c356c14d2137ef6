"""Threshold search by Bayesian optimisation against closed-loop rollouts.

The surrogate is scikit-learn's Gaussian process (RBF + white noise);
expected improvement and its multi-start maximisation are done here.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF, ConstantKernel, WhiteKernel

from .budget import BudgetSpec, CostModel, verify_constraints
from .env import TaskChain, evaluate_chains
from .net import MultiExitNet
from .policy import Criterion, ExitPolicy
from .seeding import derive_rng

log = logging.getLogger(__name__)

PENALTY = 10.0


@dataclass
class BOConfig:
    n_init: int = 10
    n_evals: int = 50
    n_chains: int = 100
    penalty: float = PENALTY
    n_candidates: int = 2000
    n_starts: int = 8
    xi: float = 0.01


@dataclass
class Evaluation:
    x: np.ndarray
    f_obj: float
    feasible: bool
    info: dict = field(default_factory=dict)


@dataclass
class SearchResult:
    best: Evaluation | None
    history: list[Evaluation]

    @property
    def best_so_far(self) -> np.ndarray:
        return np.maximum.accumulate([e.f_obj for e in self.history])


def penalized_objective(scc: float, feasible: bool, penalty: float = PENALTY) -> float:
    return scc - (0.0 if feasible else penalty)


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float, xi: float = 0.0) -> np.ndarray:
    sigma = np.maximum(sigma, 1e-12)
    z = (mu - best - xi) / sigma
    return (mu - best - xi) * norm.cdf(z) + sigma * norm.pdf(z)


def _surrogate_targets(history: Sequence[Evaluation]) -> np.ndarray:
    """Penalised points are fitted at the worst feasible value: a cliff of
    size ``penalty`` would otherwise dominate the GP's length scales."""
    y = np.array([e.f_obj for e in history])
    ok = np.array([e.feasible for e in history])
    if ok.any() and not ok.all():
        y = np.where(ok, y, y[ok].min())
    return y


def _fit_gp(X: np.ndarray, y: np.ndarray, seed: int) -> GaussianProcessRegressor:
    d = X.shape[1]
    kernel = ConstantKernel(1.0, (1e-3, 1e3)) * RBF(np.full(d, 0.3), (1e-2, 1e1)) + WhiteKernel(1e-3, (1e-8, 1e0))
    gp = GaussianProcessRegressor(kernel=kernel, normalize_y=True, n_restarts_optimizer=2, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        gp.fit(X, y)
    return gp


def _propose(gp, best: float, d: int, rng: np.random.Generator, cfg: BOConfig) -> np.ndarray:
    cand = rng.uniform(0.0, 1.0, size=(cfg.n_candidates, d))
    mu, sd = gp.predict(cand, return_std=True)
    ei = expected_improvement(mu, sd, best, cfg.xi)
    starts = cand[np.argsort(-ei)[: cfg.n_starts]]

    def neg_ei(z):
        m, s = gp.predict(z.reshape(1, -1), return_std=True)
        return -float(expected_improvement(m, s, best, cfg.xi)[0])

    top, top_val = starts[0], neg_ei(starts[0])
    for s0 in starts:
        res = minimize(neg_ei, s0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * d, options={"maxiter": 50})
        if res.fun < top_val:
            top, top_val = res.x, res.fun
    return np.clip(top, 0.0, 1.0)


def bayes_optimize(
    objective: Callable[[np.ndarray], Evaluation],
    lower: Sequence[float],
    upper: Sequence[float],
    cfg: BOConfig,
    seed: int,
    initial: Sequence[Sequence[float]] = (),
) -> SearchResult:
    """Maximise ``objective`` over the box. Points in ``initial`` are evaluated
    first, then random points up to ``cfg.n_init``, then EI proposals."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    span = np.where(hi > lo, hi - lo, 1.0)
    d = len(lo)
    rng = derive_rng(seed, "bo")
    history: list[Evaluation] = []
    Z: list[np.ndarray] = []

    def run(z):
        x = lo + z * span
        ev = objective(x)
        history.append(ev)
        Z.append(z)
        log.debug("bo eval %d f=%.4f feasible=%s", len(history), ev.f_obj, ev.feasible)

    for x0 in initial:
        if len(history) >= cfg.n_evals:
            break
        run(np.clip((np.asarray(x0, float) - lo) / span, 0.0, 1.0))
    while len(history) < min(cfg.n_init, cfg.n_evals):
        run(rng.uniform(0.0, 1.0, size=d))
    while len(history) < cfg.n_evals:
        y = _surrogate_targets(history)
        gp = _fit_gp(np.array(Z), y, seed)
        run(_propose(gp, float(y.max()), d, rng, cfg))
    feasible = [e for e in history if e.feasible]
    best = max(feasible, key=lambda e: e.f_obj) if feasible else None
    return SearchResult(best, history)


# ---------------------------------------------------------------------------
# stand-in objective with a known optimum


@dataclass
class QuadraticObjective:
    """f(x) = peak - sum(w * (x - centre)^2), penalised outside ``feasible_hi``."""

    centre: np.ndarray
    weights: np.ndarray
    feasible_hi: np.ndarray
    peak: float = 1.0
    penalty: float = PENALTY

    @classmethod
    def random(cls, d: int, seed: int) -> "QuadraticObjective":
        rng = derive_rng(seed, "quadratic")
        hi = rng.uniform(0.5, 0.9, d)
        centre = hi * rng.uniform(0.2, 0.8, d)
        return cls(centre, rng.uniform(0.5, 2.0, d), hi)

    @property
    def optimum(self) -> float:
        return self.peak

    def __call__(self, x: np.ndarray) -> Evaluation:
        ok = bool(np.all(x <= self.feasible_hi))
        val = self.peak - float(np.sum(self.weights * (x - self.centre) ** 2))
        return Evaluation(np.asarray(x, float), penalized_objective(val, ok, self.penalty), ok)


# ---------------------------------------------------------------------------
# rollout objective


class RolloutObjective:
    """Evaluate a threshold vector on a fixed set of chains."""

    def __init__(
        self,
        net: MultiExitNet,
        chains: Sequence[TaskChain],
        budget: BudgetSpec,
        cost: CostModel,
        n_cap: int,
        penalty: float = PENALTY,
    ):
        self.net = net
        self.chains = list(chains)
        self.budget = budget
        self.cost = cost
        self.n_cap = n_cap
        self.penalty = penalty

    def eta(self, x: np.ndarray) -> np.ndarray:
        eta = np.full(self.cost.n_exits, math.inf)
        eta[: self.n_cap - 1] = x
        return eta

    def __call__(self, x: np.ndarray) -> Evaluation:
        policy = ExitPolicy(self.net, Criterion.action(self.eta(x)), self.n_cap)
        res = evaluate_chains(policy, self.chains)
        rep = verify_constraints(res.step_logs, self.budget, self.cost, self.n_cap)
        scc = res.avg_len / 5.0
        info = {
            "scc": scc,
            "avg_len": res.avg_len,
            "avg_flops": rep.avg_flops,
            "peak_flops": rep.peak_flops,
            "mem": rep.mem,
        }
        return Evaluation(np.asarray(x, float), penalized_objective(scc, rep.ok, self.penalty), rep.ok, info)


def search_bounds(scores: np.ndarray, n_cap: int, pct: float = 99.0) -> tuple[np.ndarray, np.ndarray]:
    upper = np.percentile(scores[:, : n_cap - 1], pct, axis=0)
    return np.zeros(n_cap - 1), np.maximum(upper, 1e-9)


def solve_online(
    net: MultiExitNet,
    chains: Sequence[TaskChain],
    budget: BudgetSpec,
    cost: CostModel,
    n_cap: int,
    scores: np.ndarray,
    cfg: BOConfig,
    seed: int,
    fallback: Sequence[float],
    warm_start: Sequence[Sequence[float]] = (),
) -> tuple[np.ndarray, SearchResult]:
    """Returns the best feasible eta (length N, inf at and beyond the cap).
    Falls back to ``fallback`` when nothing feasible was found."""
    if n_cap == 1:
        eta = np.full(cost.n_exits, math.inf)
        return eta, SearchResult(None, [])
    obj = RolloutObjective(net, chains, budget, cost, n_cap, cfg.penalty)
    lo, hi = search_bounds(scores, n_cap)
    init = [np.clip(np.asarray(w, float)[: n_cap - 1], lo, hi) for w in warm_start]
    result = bayes_optimize(obj, lo, hi, cfg, seed, initial=init)
    if result.best is None:
        log.warning("online search found no feasible thresholds; using the offline ones")
        return np.asarray(fallback, float), result
    return obj.eta(result.best.x), result


def write_bo_log(result: SearchResult, path: str | Path) -> None:
    if not result.history:
        Path(path).write_text("eval,scc,avg_flops,peak_flops,mem,f_obj,feasible\n")
        return
    d = len(result.history[0].x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval", *[f"eta{i + 1}" for i in range(d)], "scc", "avg_flops", "peak_flops", "mem", "f_obj", "feasible"])
        for k, e in enumerate(result.history, start=1):
            inf = e.info
            w.writerow(
                [k, *[repr(float(v)) for v in e.x], inf.get("scc", ""), inf.get("avg_flops", ""),
                 inf.get("peak_flops", ""), inf.get("mem", ""), repr(e.f_obj), int(e.feasible)]
            )
