"""Command line: gen-data | train | calibrate | eval | report.

Every option can also come from a flat JSON file given with ``--config``;
flags beat the file, and ``DEER_SEED`` beats both for the seed. Each command
writes the resolved configuration next to its outputs.

Exit codes: 0 ok, 1 usage error, 2 infeasible budget, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import budget as bud
from . import experiments as exp
from .env import DatasetConfig, eval_chains, generate_dataset, read_dataset, write_dataset
from .net import NetConfig, load_checkpoint
from .policy import Criterion
from .seeding import ENV_SEED, derive_rng, master_seed
from .tensor import NonFiniteError
from .training import TrainConfig, split_train_val, train

log = logging.getLogger("exitpolicy")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3
GIGA = 1e9


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# (flag, type, default, help); type "flag" is a boolean switch
OPTIONS: dict[str, list[tuple]] = {
    "gen-data": [
        ("--out", str, None, "output dataset path (.jsonl)"),
        ("--episodes", int, 2000, "number of episodes"),
        ("--splits", str, "ABCD", "environment splits to draw from"),
        ("--seed", int, 0, "master seed"),
    ],
    "train": [
        ("--data", str, None, "training dataset (.jsonl)"),
        ("--out", str, None, "run directory"),
        ("--no-aux", "flag", False, "disable the auxiliary per-exit heads"),
        ("--resume", "flag", False, "continue from the run directory's last epoch"),
        ("--epochs-joint", int, 4, "epochs training backbone and heads"),
        ("--epochs-post", int, 1, "epochs training the main head alone"),
        ("--steps-per-epoch", int, 150, "optimiser steps per epoch"),
        ("--batch-size", int, 32, "windows per step"),
        ("--window", int, 12, "window length"),
        ("--lam", float, 0.01, "gripper loss weight"),
        ("--lr-backbone", float, 1e-3, "backbone learning rate"),
        ("--lr-head", float, 1e-3, "head learning rate"),
        ("--val-fraction", float, 0.05, "held-out share of episodes"),
        ("--n-exits", int, 4, "number of exits"),
        ("--blocks-per-exit", int, 2, "blocks between exits"),
        ("--d-model", int, 64, "token width"),
        ("--lstm-hidden", int, 128, "LSTM width"),
        ("--mlp-hidden", int, 128, "action MLP width"),
        ("--seed", int, 0, "master seed"),
    ],
    "calibrate": [
        ("--model", str, None, "checkpoint"),
        ("--data", str, None, "calibration episodes (.jsonl)"),
        ("--out", str, None, "threshold file (.json)"),
        ("--mode", str, "dataset", "dataset (offline) or online"),
        ("--criterion", str, "action", "action, feature or time"),
        ("--avg-gflops", float, None, "average per-step budget in GFLOPs"),
        ("--avg-frac", float, None, "average per-step budget as a fraction of full depth"),
        ("--total-gflops", float, None, "task-suite budget in GFLOPs (with --n-tasks)"),
        ("--n-tasks", int, None, "tasks covered by --total-gflops"),
        ("--peak-gflops", float, math.inf, "per-step peak budget in GFLOPs"),
        ("--mem-gb", float, math.inf, "memory cap in GB"),
        ("--fraction", float, 1.0, "share of --data used for calibration"),
        ("--deltas", str, None, "reuse a calibration score dump instead of the model"),
        ("--bo-evals", int, 50, "online: total evaluations"),
        ("--bo-init", int, 10, "online: random initial points"),
        ("--bo-chains", int, 100, "online: chains per evaluation"),
        ("--split", str, "D", "online: environment split for rollouts"),
        ("--seed", int, 0, "master seed"),
    ],
    "eval": [
        ("--model", str, None, "checkpoint"),
        ("--thresholds", str, None, "threshold file from calibrate"),
        ("--static-exit", int, None, "run a fixed depth instead"),
        ("--criterion", str, None, "must match the threshold file if given"),
        ("--chains", int, 500, "evaluation chains"),
        ("--split", str, "D", "environment split"),
        ("--batch", int, None, "chains rolled out together (default: all)"),
        ("--label", str, None, "row label in reports"),
        ("--out", str, None, "output directory"),
        ("--seed", int, 0, "master seed"),
    ],
    "report": [
        ("--inputs", "list", None, "metrics.json files"),
        ("--out", str, None, "output directory"),
    ],
}
REQUIRED = {
    "gen-data": ["out"],
    "train": ["data", "out"],
    "calibrate": ["model", "out"],
    "eval": ["model", "out"],
    "report": ["inputs", "out"],
}


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="exitpolicy", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON config file")
        for flag, typ, _, hlp in opts:
            if typ == "flag":
                sp.add_argument(flag, action="store_true", default=argparse.SUPPRESS, help=hlp)
            elif typ == "list":
                sp.add_argument(flag, nargs="+", default=argparse.SUPPRESS, help=hlp)
            else:
                sp.add_argument(flag, type=typ, default=argparse.SUPPRESS, help=hlp)
    return p


def resolve(cmd: str, given: dict) -> dict:
    """Defaults, then config file, then flags, then DEER_SEED."""
    opts = {_dest(f): (t, d) for f, t, d, _ in OPTIONS[cmd]}
    cfg = {k: d for k, (_, d) in opts.items()}
    path = given.pop("config", None)
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in opts:
                raise UsageError(f"unknown config key '{k}' for {cmd}")
            cfg[key] = v
    cfg.update(given)
    if "seed" in cfg:
        try:
            cfg["seed"] = master_seed(cfg["seed"])
        except ValueError:
            raise UsageError(f"{ENV_SEED} and --seed must be integers") from None
    missing = [k for k in REQUIRED[cmd] if cfg.get(k) in (None, [])]
    if missing:
        raise UsageError(f"{cmd}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _snapshot(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    clean = {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in cfg.items()}
    path.write_text(json.dumps(clean, indent=2, sort_keys=True))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: dict) -> int:
    episodes, manifest = generate_dataset(DatasetConfig(cfg["episodes"], cfg["splits"]), cfg["seed"])
    path = write_dataset(episodes, manifest, cfg["out"])
    _snapshot(cfg, _sibling(path, ".config.json"))
    log.info("wrote %d episodes (mean length %.2f) to %s", len(episodes), manifest["mean_len"], path)
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    episodes, _ = read_dataset(cfg["data"])
    tcfg = TrainConfig(
        H=cfg["window"],
        lam=cfg["lam"],
        batch_size=cfg["batch_size"],
        lr_backbone=cfg["lr_backbone"],
        lr_head=cfg["lr_head"],
        epochs_joint=cfg["epochs_joint"],
        epochs_posttrain=cfg["epochs_post"],
        steps_per_epoch=cfg["steps_per_epoch"],
        aux_enabled=not cfg["no_aux"],
        seed=cfg["seed"],
        val_fraction=cfg["val_fraction"],
    )
    ncfg = NetConfig(
        n_exits=cfg["n_exits"],
        blocks_per_exit=cfg["blocks_per_exit"],
        d_model=cfg["d_model"],
        lstm_hidden=cfg["lstm_hidden"],
        mlp_hidden=cfg["mlp_hidden"],
        aux_heads=not cfg["no_aux"],
    )
    train_eps, val_eps = split_train_val(episodes, tcfg.val_fraction, tcfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out / "resolved_config.json")
    write_dataset(val_eps, {"n_episodes": len(val_eps), "source": str(cfg["data"]), "role": "validation"}, out / "val.jsonl")
    res = train(tcfg, train_eps, ncfg, out_dir=out, resume=cfg["resume"], val_episodes=val_eps)
    if res.val_loss:
        log.info("final validation loss per exit: %s", ", ".join(f"{v:.5f}" for v in res.val_loss[-1]))
    return EXIT_OK


def _per_step_budget(cfg: dict, cost: bud.CostModel, mean_len: float | None) -> float:
    if cfg["avg_gflops"] is not None:
        return cfg["avg_gflops"] * GIGA
    if cfg["avg_frac"] is not None:
        return cfg["avg_frac"] * cost.flops[-1]
    if cfg["total_gflops"] is not None:
        if not cfg["n_tasks"] or not mean_len:
            raise UsageError("--total-gflops needs --n-tasks and a dataset manifest with mean_len")
        return bud.BudgetSpec(cfg["total_gflops"] * GIGA, n_tasks=cfg["n_tasks"], mean_len=mean_len).per_step
    raise UsageError("give one of --avg-gflops, --avg-frac, --total-gflops")


def cmd_calibrate(cfg: dict) -> int:
    if cfg["mode"] not in ("dataset", "online"):
        raise UsageError("--mode must be dataset or online")
    if cfg["criterion"] not in ("action", "feature", "time"):
        raise UsageError("--criterion must be action, feature or time")
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    net, _ = load_checkpoint(cfg["model"])
    cost = bud.build_cost_model(net.config)
    episodes, manifest = (read_dataset(cfg["data"]) if cfg["data"] else ([], {}))
    b = _per_step_budget(cfg, cost, manifest.get("mean_len"))
    peak = cfg["peak_gflops"] * GIGA if cfg["peak_gflops"] is not None else math.inf
    mem = cfg["mem_gb"] * GIGA if cfg["mem_gb"] is not None else math.inf
    n = bud.cap_exit(cost, peak, mem)
    alloc = bud.solve_allocation(cost, b, n)
    if cfg["deltas"]:
        if cfg["criterion"] == "time":
            raise UsageError("--deltas does not apply to the time criterion")
        scores = bud.read_scores_csv(cfg["deltas"])
        eta = bud.fit_thresholds(alloc.proportions, scores, n).eta
        crit = Criterion.action(eta) if cfg["criterion"] == "action" else Criterion.feature(1 - eta)
        cal = exp.Calibration(crit, n, alloc, scores, eta)
    else:
        if not episodes:
            raise UsageError("calibrate needs --data (or --deltas)")
        subset = exp.calibration_subset(episodes, cfg["fraction"], cfg["seed"])
        cal = exp.calibrate(net, subset, cfg["criterion"], b, peak, mem)
        if cal.scores is not None:
            bud.write_scores_csv(cal.scores, _sibling(out, ".deltas.csv"))
    body = cal.threshold_body(cost)
    body["per_step_budget"] = b
    if cfg["mode"] == "online":
        if cfg["criterion"] != "action":
            raise UsageError("online mode searches action-consistency thresholds only")
        from .online import BOConfig, solve_online, write_bo_log

        bo = BOConfig(n_init=cfg["bo_init"], n_evals=cfg["bo_evals"], n_chains=cfg["bo_chains"])
        chains = eval_chains(bo.n_chains, int(derive_rng(cfg["seed"], "bo-chains").integers(2**31)), cfg["split"])
        spec = bud.BudgetSpec.from_per_step(b, peak, mem)
        eta, result = solve_online(
            net, chains, spec, cost, n, cal.scores, bo, cfg["seed"], fallback=cal.eta, warm_start=[cal.eta[: n - 1]]
        )
        write_bo_log(result, _sibling(out, ".bo.csv"))
        body["eta"] = [None if math.isinf(v) else float(v) for v in eta]
        body["mode"] = "online"
    out.write_text(json.dumps(body, indent=2))
    _snapshot(cfg, _sibling(out, ".config.json"))
    log.info("thresholds %s (n_cap %d, q %.4f) -> %s", body["eta"], n, alloc.q, out)
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    if (cfg["thresholds"] is None) == (cfg["static_exit"] is None):
        raise UsageError("give exactly one of --thresholds and --static-exit")
    net, _ = load_checkpoint(cfg["model"])
    N = net.config.n_exits
    if cfg["static_exit"] is not None:
        k = cfg["static_exit"]
        if not 1 <= k <= N:
            raise UsageError(f"--static-exit must be in [1, {N}]")
        crit, n_cap = Criterion.static(k), k
        label = cfg["label"] or f"static-{k}"
    else:
        body = json.loads(Path(cfg["thresholds"]).read_text())
        crit, n_cap = exp.criterion_from_body(body)
        if cfg["criterion"] and cfg["criterion"] != crit.kind:
            raise UsageError(f"--criterion {cfg['criterion']} does not match the threshold file ({crit.kind})")
        label = cfg["label"] or crit.kind
    chains = eval_chains(cfg["chains"], cfg["seed"], cfg["split"])
    metrics, logs = exp.evaluate(net, crit, chains, n_cap, label, cfg["batch"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    with open(out / "episodes.jsonl", "w") as fh:
        for c, steps in enumerate(logs):
            for s in steps:
                fh.write(json.dumps({"chain": c, **s}) + "\n")
    _snapshot(cfg, out / "resolved_config.json")
    log.info(
        "%s: avg successful length %.3f, avg backbone MFLOPs %.4f, %.1f us/action",
        label, metrics["avg_successful_len"], metrics["avg_flops"] / 1e6, metrics["ns_per_action"] / 1e3,
    )
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    metrics = []
    for p in cfg["inputs"]:
        try:
            metrics.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read metrics {p}: {e}") from None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    exp.write_curve(metrics, out / "curve.csv")
    (out / "report.md").write_text(exp.markdown_report(metrics))
    (out / "report.json").write_text(json.dumps(metrics if len(metrics) > 1 else metrics[0], indent=2))
    _snapshot(cfg, out / "resolved_config.json")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
        cmd = ns.pop("command", None)
        if cmd is None:
            raise UsageError("a command is required: " + " | ".join(COMMANDS))
        cfg = resolve(cmd, ns)
        return COMMANDS[cmd](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except bud.InfeasibleBudgetError as e:
        print(f"infeasible budget: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonFiniteError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
