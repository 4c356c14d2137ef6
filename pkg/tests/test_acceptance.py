"""End-to-end acceptance checks, one test per criterion.

The trained-model criteria share one pipeline run (dataset, two training runs,
calibrations, evaluations). Set EXITPOLICY_ACCEPTANCE_DIR to keep its
artifacts between sessions; finished stages are then reused together with the
wall time they took when they ran.
"""
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from exitpolicy import budget as bud
from exitpolicy import cli
from exitpolicy import env as E
from exitpolicy import online as O
from exitpolicy.env import read_dataset
from exitpolicy.experiments import criterion_from_body, dataset_exit_fractions
from exitpolicy.net import load_checkpoint
from exitpolicy.policy import Criterion, run_episodes
from gradcheck import REL_TOL, check
from toy import network_gradcheck, random_inputs

pytestmark = pytest.mark.acceptance

INF = math.inf
N_CHAINS = 500
BUDGETS = (0.5, 0.35)  # fractions of C_N


# ---------------------------------------------------------------- pipeline


class Pipeline:
    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)

    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def stage(self, name: str, *commands) -> float:
        """Run CLI commands once; returns the seconds they took (then or now)."""
        marker = self.p(f".{name}.seconds")
        if marker.exists():
            return float(marker.read_text())
        tick = time.perf_counter()
        for argv in commands:
            code = cli.main([str(a) for a in argv])
            assert code == 0, f"{name}: {argv[0]} exited {code}"
        took = time.perf_counter() - tick
        marker.write_text(repr(took))
        return took

    def metrics(self, name: str) -> dict:
        return json.loads(self.p("ev", name, "metrics.json").read_text())

    def thresholds(self, name: str) -> dict:
        return json.loads(self.p("cal", f"{name}.json").read_text())

    def calibrate(self, kind: str, frac: float) -> list:
        return ["calibrate", "--model", self.p("run", "final.json"), "--data", self.p("run", "val.jsonl"),
                "--out", self.p("cal", f"{kind}{int(frac * 100)}.json"), "--criterion", kind, "--avg-frac", frac]

    def evaluate(self, name: str, *how, model: str = "run") -> list:
        return ["eval", "--model", self.p(model, "final.json"), *how, "--chains", N_CHAINS,
                "--label", name, "--out", self.p("ev", name)]


@pytest.fixture(scope="session")
def pipe(tmp_path_factory):
    root = os.environ.get("EXITPOLICY_ACCEPTANCE_DIR")
    return Pipeline(Path(root) if root else tmp_path_factory.mktemp("acceptance"))


@pytest.fixture(scope="session")
def headline(pipe):
    """The timed pipeline: data, training, calibration at half of C_N, evaluation."""
    seconds = {
        "gen": pipe.stage("gen", ["gen-data", "--out", pipe.p("data", "train.jsonl"), "--episodes", 2000,
                                  "--splits", "ABCD", "--seed", 0]),
        "train": pipe.stage("train", ["train", "--data", pipe.p("data", "train.jsonl"), "--out", pipe.p("run"),
                                      "--seed", 0]),
        "calibrate": pipe.stage("calibrate", pipe.calibrate("action", 0.5)),
        "eval": pipe.stage("eval", pipe.evaluate("action50", "--thresholds", pipe.p("cal", "action50.json")),
                           pipe.evaluate("static4", "--static-exit", 4)),
    }
    return seconds


@pytest.fixture(scope="session")
def trained(pipe, headline):
    net, extra = load_checkpoint(pipe.p("run", "final.json"))
    return net, extra


# ---------------------------------------------------------------- criteria


def test_criterion_01_gradients(record_property):
    from test_tensor import CASES

    tick = time.perf_counter()
    worst_op = 0.0
    for name, seed in itertools.product(sorted(CASES), range(10)):
        fn, tensors = CASES[name](np.random.default_rng(seed))
        worst_op = max(worst_op, check(fn, tensors))
    worst_net = max(network_gradcheck(seed) for seed in range(10))
    took = time.perf_counter() - tick
    record_property("detail", f"ops {worst_op:.1e}, network {worst_net:.1e}, {took:.1f}s")
    assert worst_op < REL_TOL and worst_net < REL_TOL
    assert took < 30


def test_criterion_02_cost_model_table():
    m = bud.table_cost_model(1.3, 2, n_exits=6, layer_mem_gb=0.5)
    assert m.flops == tuple(int(v * 1e8) for v in (26, 52, 78, 104, 130, 156))
    assert bud.table_total_flops(1.3, 24) == 31_200_000_000
    assert m.mem[1] == 2_000_000_000  # four layers loaded


def _grid_q(costs, n, budget):
    """Largest q on a 1e-4 grid whose geometric mix costs at most the budget."""
    grid = np.arange(1, 10_001) / 10_000
    w = grid[:, None] ** np.arange(1, n + 1)
    g = (w / w.sum(axis=1, keepdims=True)) @ np.asarray(costs[:n], float)
    return grid[np.searchsorted(g, budget, side="right") - 1]


def test_criterion_03_allocation_matches_grid(record_property):
    tick = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(2, 7))
        costs = np.cumsum(rng.uniform(0.5, 3.0, size=N))
        model = bud.CostModel(tuple(int(c * 1e6) for c in costs), (0,) * N)
        costs = np.array(model.flops, float)
        lo, hi = costs[0], bud.expected_cost(1.0, costs, N)
        b = rng.uniform(lo + 1e-3 * (hi - lo), hi)
        q = bud.solve_allocation(model, b).q
        worst = max(worst, abs(q - _grid_q(costs, N, b)))
    # degenerate cases
    m = bud.CostModel((10, 20, 30, 40), (0,) * 4)
    one = bud.solve_allocation(m, 15, n=1)
    uni = bud.solve_allocation(m, 1000)
    with pytest.raises(bud.InfeasibleBudgetError):
        bud.solve_allocation(m, 9.99)
    took = time.perf_counter() - tick
    record_property("detail", f"max |q - grid| {worst:.1e}, {took:.1f}s")
    assert worst <= 1e-4
    assert one.proportions == (1.0, 0.0, 0.0, 0.0)
    np.testing.assert_allclose(uni.proportions, 0.25)
    assert took < 10


def test_criterion_04_threshold_fit(pipe, trained, record_property):
    rng = np.random.default_rng(7)
    worst_synthetic = 0
    for _ in range(20):
        N = int(rng.integers(2, 6))
        scores = rng.permutation(np.arange(1000 * N, dtype=float)).reshape(1000, N)
        p = rng.dirichlet(np.ones(N))
        eta = bud.fit_thresholds(p, scores).eta
        exits = bud.replay_exits(eta, scores)
        remaining = 1000
        for i in range(N - 1):
            k = min(int(round(p[i] * 1000)), remaining)
            got = int((exits == i + 1).sum())
            worst_synthetic = max(worst_synthetic, abs(got - k))
            remaining -= got
    net, _ = trained
    body = pipe.thresholds("action50")
    crit, n_cap = criterion_from_body(body)
    val, _ = read_dataset(pipe.p("run", "val.jsonl"))
    measured = dataset_exit_fractions(net, crit, val, n_cap)
    gap = float(np.abs(measured - np.array(body["proportions"])).max())
    held = pipe.metrics("action50")["avg_flops"] / body["per_step_budget"]
    record_property("detail", f"synthetic max miss {worst_synthetic}, exit-share gap {100 * gap:.2f} pp, "
                              f"held-out FLOPs {held:.3f} x budget")
    assert worst_synthetic <= 1
    assert gap <= 0.03
    assert held <= 1.05


def test_criterion_05_degenerate_thresholds(trained, record_property):
    net, _ = trained
    starts = [E.sample_chain(np.random.default_rng([5, i]), "D")[0] for i in range(50)]
    worlds, instr = [c.initial for c in starts], [c.instructions[0] for c in starts]

    def run(crit):
        logs = run_episodes(net, worlds, instr, crit)
        return [[json.dumps(s["action"]) for s in log.steps] for log in logs], [log.success for log in logs]

    low = run(Criterion.action([INF] * 4)) == run(Criterion.static(1))
    full = run(Criterion.action([0.0, 0.0, 0.0, INF])) == run(Criterion.static(4))
    record_property("detail", f"eta=inf vs exit 1: {low}, eta=0 vs full depth: {full}")
    assert low and full


def test_criterion_06_incremental_forward(trained, record_property):
    net = trained[0].astype(np.float32)
    N = net.config.n_exits
    instr, obs = random_inputs(200, seed=6)
    worst = 0.0
    for i, j in itertools.combinations(range(1, N + 1), 2):
        inc = net.start_cache(instr, obs)
        net.forward_to_exit(inc, i)
        net.forward_to_exit(inc, j)
        fresh = net.start_cache(instr, obs)
        net.forward_to_exit(fresh, j)
        for k in range(j + 1):
            worst = max(worst, float(np.abs(inc.token_states[k].data - fresh.token_states[k].data).max()))
    record_property("detail", f"max abs difference {worst:.1e} at float32")
    assert worst <= 1e-6


def test_criterion_07_headline(pipe, headline, record_property):
    dyn, full = pipe.metrics("action50"), pipe.metrics("static4")
    ratio = dyn["avg_successful_len"] / full["avg_successful_len"]
    frac = dyn["avg_flops"] / dyn["full_flops"]
    total = sum(headline.values())
    n_eps = sum(1 for _ in open(pipe.p("data", "train.jsonl")))
    record_property("detail", f"dynamic {dyn['avg_successful_len']:.3f} vs full {full['avg_successful_len']:.3f} "
                              f"({100 * ratio:.1f}%), FLOPs {frac:.3f} C_N, pipeline {total / 60:.1f} min")
    assert n_eps >= 2000
    assert ratio >= 0.95
    assert frac <= 0.55
    assert total < 45 * 60


@pytest.fixture(scope="session")
def ablation(pipe, headline):
    for frac in BUDGETS:
        tag = int(frac * 100)
        for kind in ("action", "feature", "time"):
            if kind == "action" and frac == 0.5:
                continue
            pipe.stage(f"cal-{kind}{tag}", pipe.calibrate(kind, frac))
            pipe.stage(f"ev-{kind}{tag}", pipe.evaluate(f"{kind}{tag}", "--thresholds",
                                                        pipe.p("cal", f"{kind}{tag}.json")))
    names = [f"{k}{int(f * 100)}" for f in BUDGETS for k in ("action", "feature", "time")]
    pipe.stage("report", ["report", "--inputs", *(pipe.p("ev", n, "metrics.json") for n in names + ["static4"]),
                          "--out", pipe.p("report")])
    return names


def test_criterion_08_criteria_ablation(pipe, ablation, record_property):
    report = json.loads(pipe.p("report", "report.json").read_text())
    kinds = {m["criterion"] for m in report}
    rows = []
    ok = True
    for frac in BUDGETS:
        tag = int(frac * 100)
        got = {k: pipe.metrics(f"{k}{tag}") for k in ("action", "feature", "time")}
        rows.append(f"b={frac}: " + ", ".join(
            f"{k} {m['avg_successful_len']:.3f}@{m['avg_flops'] / m['full_flops']:.2f}" for k, m in got.items()))
        ok &= got["action"]["avg_successful_len"] >= got["feature"]["avg_successful_len"]
    record_property("detail", "; ".join(rows))
    assert {"action", "feature", "time"} <= kinds
    assert ok


@pytest.fixture(scope="session")
def no_aux(pipe, headline):
    pipe.stage("train-noaux", ["train", "--data", pipe.p("data", "train.jsonl"), "--out", pipe.p("run_noaux"),
                               "--seed", 0, "--no-aux"])
    for model in ("run", "run_noaux"):
        pipe.stage(f"ev-{model}", pipe.evaluate(f"{model}-static1", "--static-exit", 1, model=model),
                   pipe.evaluate(f"{model}-static4", "--static-exit", 4, model=model))
    return load_checkpoint(pipe.p("run_noaux", "final.json"))


def test_criterion_09_aux_ablation(pipe, trained, no_aux, record_property):
    with_aux = trained[1]["val_loss"][-1][0]
    without = no_aux[1]["val_loss"][-1][0]
    same = {k: v for k, v in trained[1]["train_config"].items() if k != "aux_enabled"} == {
        k: v for k, v in no_aux[1]["train_config"].items() if k != "aux_enabled"}
    succ = ", ".join(
        f"{m}/exit{k} {pipe.metrics(f'{m}-static{k}')['avg_successful_len']:.3f}"
        for m in ("run", "run_noaux") for k in (1, 4))
    record_property("detail", f"exit-1 val loss {with_aux:.5f} (aux) vs {without:.5f} (no aux); {succ}")
    assert same
    assert with_aux < without


def test_criterion_10_online_solver(pipe, trained, record_property):
    hits = []
    for seed in range(10):
        q = O.QuadraticObjective.random(3, seed)
        res = O.bayes_optimize(q, [0.0] * 3, [1.0] * 3, O.BOConfig(n_evals=60), seed)
        hits.append(res.best is not None and res.best.f_obj >= 0.95 * q.optimum)

    net, _ = trained
    cost = bud.build_cost_model(net.config)
    body = pipe.thresholds("action50")
    offline = np.array([INF if v is None else v for v in body["eta"]])
    scores = bud.read_scores_csv(pipe.p("cal", "action50.deltas.csv"))
    spec = bud.BudgetSpec.from_per_step(body["per_step_budget"])
    n = body["n_cap"]
    feasible, wins = 0, 0
    for seed in range(10):
        # no warm start: the offline vector is the baseline, not a starting point
        search = E.eval_chains(100, seed=1000 + seed)
        eta, _ = O.solve_online(net, search, spec, cost, n, scores, O.BOConfig(n_init=5, n_evals=20), seed,
                                fallback=offline)
        objective = O.RolloutObjective(net, search, spec, cost, n)
        found, base = objective(eta[: n - 1]), objective(offline[: n - 1])
        feasible += found.feasible
        wins += found.f_obj >= base.f_obj
    record_property("detail", f"quadratic {sum(hits)}/10 within 5%, trained: feasible {feasible}/10, "
                              f"online >= offline {wins}/10")
    assert all(hits)
    assert feasible == 10
    assert wins >= 7
