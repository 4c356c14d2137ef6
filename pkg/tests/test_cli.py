import csv
import json
import math

import numpy as np
import pytest

from exitpolicy import cli
from exitpolicy.net import MultiExitNet, NetConfig, save_checkpoint

TINY = ["--n-exits", "3", "--blocks-per-exit", "1", "--d-model", "8", "--lstm-hidden", "8", "--mlp-hidden", "8"]


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--out", d / "data.jsonl", "--episodes", 30, "--seed", 4) == 0
    net = MultiExitNet(NetConfig(n_exits=3, blocks_per_exit=1, d_model=8, lstm_hidden=8, mlp_hidden=8), seed=0)
    save_checkpoint(net, d / "model.json")
    return d


def read(p):
    return json.loads(p.read_text())


# ---------------------------------------------------------------- usage


def test_usage_errors_exit_one(tmp_path, capsys):
    assert run() == 1
    assert run("gen-data") == 1
    assert run("gen-data", "--out", tmp_path / "x.jsonl", "--bogus", 1) == 1
    assert run("frobnicate") == 1
    assert "usage error" in capsys.readouterr().err


def test_unknown_config_key_is_a_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"episodes": 5, "colour": "red"}))
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d.jsonl") == 1
    cfg.write_text("[1, 2]")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d.jsonl") == 1


def test_precedence_defaults_file_flags_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"episodes": 7, "seed": 3, "splits": "A"}))
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "a.jsonl", "--episodes", 5) == 0
    snap = read(tmp_path / "a.config.json")
    assert snap["episodes"] == 5 and snap["seed"] == 3 and snap["splits"] == "A"
    monkeypatch.setenv("DEER_SEED", "11")
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "b.jsonl", "--seed", 2) == 0
    assert read(tmp_path / "b.config.json")["seed"] == 11
    assert read(tmp_path / "b.manifest.json")["seed"] == 11
    monkeypatch.setenv("DEER_SEED", "eleven")
    assert run("gen-data", "--out", tmp_path / "c.jsonl") == 1


def test_gen_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / f"{name}.jsonl", "--episodes", 10, "--seed", 9) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


# ---------------------------------------------------------------- train


def test_train_writes_run_directory(work, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--data", work / "data.jsonl", "--out", out, *TINY, "--epochs-joint", 1, "--epochs-post", 1,
            "--steps-per-epoch", 2, "--batch-size", 2, "--window", 3, "--val-fraction", 0.2]
    assert run(*args) == 0
    for f in ("final.json", "train_log.csv", "resolved_config.json", "val.jsonl", "epoch_0.json", "epoch_1.json"):
        assert (out / f).exists(), f
    with open(out / "train_log.csv") as fh:
        assert next(csv.reader(fh)) == ["epoch", "phase", "step", "loss_total", "loss_seq", "loss_aux", "grad_norm"]
    assert read(out / "resolved_config.json")["d_model"] == 8


# ---------------------------------------------------------------- calibrate


def test_calibrate_offline_writes_thresholds_and_scores(work):
    out = work / "cal" / "action.json"
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", out,
               "--avg-frac", 0.6) == 0
    body = read(out)
    assert {"criterion", "eta", "n_cap", "cost_model_hash"} <= set(body)
    assert body["criterion"] == "action" and body["eta"][-1] is None and body["n_cap"] == 3
    with open(work / "cal" / "action.deltas.csv") as fh:
        assert next(csv.reader(fh)) == ["sample_id", "exit", "delta"]
    again = work / "cal" / "again.json"
    assert run("calibrate", "--model", work / "model.json", "--deltas", work / "cal" / "action.deltas.csv",
               "--out", again, "--avg-frac", 0.6) == 0
    assert read(again)["eta"] == body["eta"]


def test_calibrate_budget_forms_agree(work):
    from exitpolicy.budget import build_cost_model
    from exitpolicy.net import load_checkpoint

    cost = build_cost_model(load_checkpoint(work / "model.json")[0].config)
    frac, gfl = work / "f.json", work / "g.json"
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", frac,
               "--avg-frac", 0.5) == 0
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", gfl,
               "--avg-gflops", 0.5 * cost.flops[-1] / 1e9) == 0
    assert read(frac)["per_step_budget"] == pytest.approx(read(gfl)["per_step_budget"])
    man = read(work / "data.manifest.json")
    tot = work / "t.json"
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", tot,
               "--total-gflops", 0.5 * cost.flops[-1] / 1e9 * 4 * man["mean_len"], "--n-tasks", 4) == 0
    assert read(tot)["per_step_budget"] == pytest.approx(read(frac)["per_step_budget"])


def test_calibrate_time_and_feature(work):
    for kind in ("time", "feature"):
        out = work / f"{kind}.json"
        assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", out,
                   "--avg-frac", 0.6, "--criterion", kind) == 0
        assert read(out)["criterion"] == kind
    sched = read(work / "time.json")["schedule"]
    assert sched == sorted(sched)


def test_infeasible_budget_exits_two(work, capsys):
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", work / "x.json",
               "--avg-gflops", 1e-9) == 2
    assert "C_1" in capsys.readouterr().err
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", work / "y.json",
               "--avg-frac", 0.5, "--peak-gflops", 1e-12) == 2


def test_calibrate_usage_errors(work):
    base = ["calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", work / "z.json"]
    assert run(*base) == 1  # no budget
    assert run(*base, "--avg-frac", 0.5, "--mode", "later") == 1
    assert run(*base, "--avg-frac", 0.5, "--criterion", "magic") == 1
    assert run(*base, "--total-gflops", 1.0) == 1


def test_numeric_failure_exits_three(work, tmp_path):
    net = MultiExitNet(NetConfig(n_exits=3, blocks_per_exit=1, d_model=8, lstm_hidden=8, mlp_hidden=8), seed=0)
    net.params["g1.b0.wq"].data[:] = np.nan
    save_checkpoint(net, tmp_path / "nan.json")
    assert run("calibrate", "--model", tmp_path / "nan.json", "--data", work / "data.jsonl", "--out",
               tmp_path / "t.json", "--avg-frac", 0.5) == 3


def test_online_calibration_writes_search_log(work):
    out = work / "online.json"
    assert run("calibrate", "--model", work / "model.json", "--data", work / "data.jsonl", "--out", out,
               "--avg-frac", 0.6, "--mode", "online", "--bo-evals", 3, "--bo-init", 2, "--bo-chains", 2) == 0
    assert read(out)["mode"] == "online"
    with open(work / "online.bo.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and list(rows[0])[:3] == ["eval", "eta1", "eta2"]


# ---------------------------------------------------------------- eval / report


def test_eval_static_exit_histogram(work):
    out = work / "ev_static2"
    assert run("eval", "--model", work / "model.json", "--static-exit", 2, "--chains", 4, "--out", out) == 0
    m = read(out / "metrics.json")
    hist = m["exit_histogram"]
    assert hist["1"] == 0 and hist["3"] == 0 and hist["2"] == m["n_steps"] > 0
    first = json.loads((out / "episodes.jsonl").read_text().splitlines()[0])
    assert {"chain", "t", "exit", "flops_backbone", "flops_head", "delta", "action", "ns", "subtask"} <= set(first)
    assert read(out / "resolved_config.json")["static_exit"] == 2


def test_eval_is_deterministic(work):
    a, b = work / "det_a", work / "det_b"
    for out in (a, b):
        assert run("eval", "--model", work / "model.json", "--static-exit", 3, "--chains", 3, "--out", out) == 0
    strip = lambda m: {k: v for k, v in m.items() if k not in ("wall_seconds", "ns_per_action")}
    assert strip(read(a / "metrics.json")) == strip(read(b / "metrics.json"))


def test_eval_usage_errors(work):
    m = work / "model.json"
    assert run("eval", "--model", m, "--out", work / "e1") == 1
    assert run("eval", "--model", m, "--static-exit", 1, "--thresholds", work / "f.json", "--out", work / "e2") == 1
    assert run("eval", "--model", m, "--static-exit", 9, "--out", work / "e3") == 1
    assert run("calibrate", "--model", m, "--data", work / "data.jsonl", "--out", work / "a.json",
               "--avg-frac", 0.6) == 0
    assert run("eval", "--model", m, "--thresholds", work / "a.json", "--criterion", "feature",
               "--out", work / "e4") == 1


def test_report_merges_runs(work):
    outs = []
    for k in (3, 1):
        out = work / f"rep_static{k}"
        assert run("eval", "--model", work / "model.json", "--static-exit", k, "--chains", 3, "--out", out) == 0
        outs.append(out / "metrics.json")
    rep = work / "report"
    assert run("report", "--inputs", *outs, "--out", rep) == 0
    with open(rep / "curve.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["label"] for r in rows] == ["static-1", "static-3"]
    assert "| static-3 |" in (rep / "report.md").read_text()
    assert len(read(rep / "report.json")) == 2
    single = work / "report1"
    assert run("report", "--inputs", outs[0], "--out", single) == 0
    assert read(single / "report.json") == read(outs[0])
    assert run("report", "--inputs", work / "missing.json", "--out", single) == 1
