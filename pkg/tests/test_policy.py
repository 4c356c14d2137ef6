import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exitpolicy import env as E
from exitpolicy import policy as P
from exitpolicy.budget import build_cost_model
from exitpolicy.net import MultiExitNet, NetConfig
from exitpolicy.policy import Criterion, ThresholdVector
from toy import random_inputs

INF = math.inf


def small(n_exits=4, **kw):
    base = dict(n_exits=n_exits, blocks_per_exit=1, d_model=16, lstm_hidden=16, mlp_hidden=16)
    base.update(kw)
    return NetConfig(**base)


def net_of(seed=0, **kw):
    return MultiExitNet(small(**kw), seed=seed)


def make_identity_group(net, g):
    for name in ("wo", "w2", "b2"):
        for b in range(net.config.blocks_per_exit):
            net.params[f"g{g}.b{b}.{name}"].data[:] = 0.0


def step_inputs(net, B=6, seed=0):
    cache = net.start_cache(*random_inputs(B, seed=seed))
    rng = np.random.default_rng(seed)
    state = net.init_state(B)
    for h, c in state.layers:
        h.data[:] = rng.normal(size=h.shape)
        c.data[:] = rng.normal(size=c.shape)
    return cache, state


def mixed_eta(net, seed=0):
    """Per-exit median deltas from a full-depth step, so rows split across exits."""
    cache, state = step_inputs(net, B=16, seed=seed)
    d = np.array(P.decide_exit_action_consistency(net, cache, state, [0.0] * 3 + [INF], 4).deltas)
    return list(np.median(d[:, :3], axis=0)) + [INF]


def worlds(n, seed=0):
    out = []
    for i in range(n):
        chain, _ = E.sample_chain(np.random.default_rng([seed, i]), "D")
        out.append((chain.initial, chain.instructions[0]))
    return out


# ---------------------------------------------------------------- thresholds


def test_threshold_vector_contract():
    tv = ThresholdVector.from_list([0.1, None])
    assert tv.to_list() == [0.1, None] and len(tv) == 2
    with pytest.raises(ValueError, match="inf"):
        ThresholdVector([0.1, 0.2])
    with pytest.raises(ValueError, match="negative"):
        ThresholdVector([-0.1, INF])


def test_criterion_validation():
    with pytest.raises(ValueError):
        Criterion("magic")
    with pytest.raises(ValueError, match="non-decreasing"):
        Criterion.time([2, 1])


# ---------------------------------------------------------------- action consistency


def test_identical_probes_exit_at_one_after_one_group():
    net = net_of()
    for n in net.param_group("head"):
        net.params[n].data[:] = 0.0
    cache, state = step_inputs(net)
    dec = P.decide_exit_action_consistency(net, cache, state, [0.1, 0.1, 0.1, INF], 4)
    assert np.all(dec.exits == 1)
    assert cache.computed_up_to == 1
    assert np.all(dec.flops_backbone == net.config.group_flops())
    assert all(d == [0.0] for d in dec.deltas)


def test_zero_thresholds_run_to_the_cap():
    net = net_of()
    cache, state = step_inputs(net)
    dec = P.decide_exit_action_consistency(net, cache, state, [0.0, 0.0, 0.0, INF], 3)
    assert np.all(dec.exits == 3)
    assert np.all(dec.head_probes == 4)  # input probe + exits 1..3
    assert all(len(d) == 3 for d in dec.deltas)


def test_cap_of_one_always_exits_at_one():
    net = net_of()
    cache, state = step_inputs(net)
    dec = P.decide_exit_action_consistency(net, cache, state, [0.0, 0.0, 0.0, INF], 1)
    assert np.all(dec.exits == 1) and np.all(dec.head_probes == 1)


def test_empty_cache_and_bad_cap_are_rejected():
    net = net_of()
    cache, state = step_inputs(net)
    with pytest.raises(ValueError, match="cache"):
        P.decide_exit_action_consistency(net, None, state, [INF] * 4, 2)
    with pytest.raises(ValueError, match="n_cap"):
        P.decide_exit_action_consistency(net, cache, state, [INF] * 4, 5)


def test_committed_state_is_the_chosen_exit_replayed_from_the_pre_step_state():
    net = net_of(seed=2)
    eta = mixed_eta(net, seed=7)
    instr, obs = random_inputs(8, seed=2)
    _, state = step_inputs(net, B=8, seed=2)
    seen = set()
    for r in range(8):
        pre = state.select([r])
        before = pre.select([0])
        dec = P.decide_exit_action_consistency(net, net.start_cache(instr[[r]], obs[[r]]), pre, eta, 4)
        assert pre.equals(before)
        e = int(dec.exits[0])
        seen.add(e)
        fresh = net.start_cache(instr[[r]], obs[[r]])
        net.forward_to_exit(fresh, e)
        pred, cand = net.head_forward(fresh.pooled[e], before)
        np.testing.assert_array_equal(pred.pose.data, dec.prediction.pose.data)
        assert cand.equals(dec.state)
    assert len(seen) > 1  # a mix of exits, else the test is vacuous


def test_batched_decisions_match_single_rows():
    net = net_of(seed=3)
    cache, state = step_inputs(net, B=5, seed=3)
    eta = mixed_eta(net)
    dec = P.decide_exit_action_consistency(net, cache, state, eta, 4)
    instr, obs = random_inputs(5, seed=3)
    for r in range(5):
        one = P.decide_exit_action_consistency(net, net.start_cache(instr[[r]], obs[[r]]), state.select([r]), eta, 4)
        assert one.exits[0] == dec.exits[r]
        np.testing.assert_allclose(one.prediction.pose.data[0], dec.prediction.pose.data[r], rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.lists(st.floats(0.0, 0.02), min_size=3, max_size=3), st.floats(0.0, 1.0))
def test_lower_thresholds_never_exit_earlier(seed, eta, shrink):
    net = net_of(seed=seed % 5)
    hi = list(eta) + [INF]
    lo = [v * shrink for v in eta] + [INF]
    c1, s1 = step_inputs(net, B=6, seed=seed)
    c2, s2 = step_inputs(net, B=6, seed=seed)
    a = P.decide_exit_action_consistency(net, c1, s1, hi, 4)
    b = P.decide_exit_action_consistency(net, c2, s2, lo, 4)
    assert np.all(b.exits >= a.exits)
    assert np.all(b.flops_backbone >= a.flops_backbone)


# ---------------------------------------------------------------- feature similarity


def test_unchanged_feature_exits_at_one():
    net = net_of()
    make_identity_group(net, 1)
    cache, state = step_inputs(net)
    dec = P.decide_exit_feature_similarity(net, cache, state, [0.999, 0.999, 0.999, 1.0], 4)
    assert np.all(dec.exits == 1) and np.all(dec.head_probes == 1)


def test_similarity_threshold_of_one_runs_to_the_cap():
    net = net_of()
    make_identity_group(net, 1)
    cache, state = step_inputs(net)
    dec = P.decide_exit_feature_similarity(net, cache, state, [1.0, 1.0, 1.0, 1.0], 3)
    assert np.all(dec.exits == 3)


def test_cosine_of_orthogonal_and_zero_vectors_is_zero():
    a = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 2.0]])
    b = np.array([[0.0, 3.0], [1.0, 1.0], [1.0, 1.0]])
    np.testing.assert_allclose(P._cosine(a, b), [0.0, 0.0, 1.0])


def test_all_zero_features_never_exit_early():
    net = net_of()
    for n in net.param_group("encoder"):
        net.params[n].data[:] = 0.0
    for g in range(1, 5):
        make_identity_group(net, g)
    cache, state = step_inputs(net)
    dec = P.decide_exit_feature_similarity(net, cache, state, [0.0, 0.0, 0.0, 0.0], 4)
    assert np.all(dec.exits == 4)


# ---------------------------------------------------------------- time


def test_time_schedule_lookup():
    sched = [1, 1, 2, 2, 3]
    assert P.time_schedule_exit(0, sched, 4) == 1
    assert P.time_schedule_exit(50, sched, 4) == 3
    assert P.time_schedule_exit(50, sched, 2) == 2
    exits = [P.time_schedule_exit(t, sched, 4) for t in range(10)]
    assert exits == sorted(exits)


def test_time_progressive_uses_each_rows_step():
    net = net_of()
    cache, state = step_inputs(net, B=3)
    dec = P.decide_exit_time_progressive(net, cache, state, np.array([0, 2, 9]), [1, 1, 2, 2, 3], 4)
    assert dec.exits.tolist() == [1, 2, 3]
    assert np.all(dec.head_probes == 1)


# ---------------------------------------------------------------- rollouts


def rollout(net, crit, n, n_cap=None):
    w = worlds(n)
    return P.run_episodes(net, [a for a, _ in w], [b for _, b in w], crit, n_cap)


def actions_of(logs):
    return [[json.dumps(s["action"]) for s in log.steps] for log in logs]


def test_infinite_thresholds_reproduce_the_first_exit_model():
    net = net_of(seed=1)
    a = rollout(net, Criterion.action([INF] * 4), 12)
    b = rollout(net, Criterion.static(1), 12)
    assert actions_of(a) == actions_of(b)
    assert all(set(log.exits) == {1} for log in a)


def test_zero_thresholds_reproduce_the_full_model():
    net = net_of(seed=1)
    a = rollout(net, Criterion.action([0.0, 0.0, 0.0, INF]), 12)
    b = rollout(net, Criterion.static(4), 12)
    assert actions_of(a) == actions_of(b)


def test_constant_schedule_is_the_static_model():
    net = net_of(seed=1)
    assert actions_of(rollout(net, Criterion.time([2]), 8)) == actions_of(rollout(net, Criterion.static(2), 8))


def test_trace_flops_follow_the_cost_model():
    net = net_of(seed=4)
    cost = build_cost_model(net.config)
    logs = rollout(net, Criterion.action(mixed_eta(net)), 10, n_cap=3)
    assert len({s["exit"] for log in logs for s in log.steps}) > 1
    head = net.config.head_flops()
    for log in logs:
        for s in log.steps:
            assert 1 <= s["exit"] <= 3
            assert s["flops_backbone"] == cost.C(s["exit"])
            assert s["flops_head"] == (s["exit"] + 1) * head
            assert len(s["delta"]) == s["exit"]
            assert s["ns"] > 0


def test_inference_never_touches_the_auxiliary_heads(monkeypatch):
    net = net_of(seed=0)

    def boom(*a, **k):
        raise AssertionError("aux head used at inference")

    monkeypatch.setattr(net, "aux_head_forward", boom)
    for crit in (Criterion.action([0.05, 0.05, 0.05, INF]), Criterion.feature([0.9] * 4), Criterion.time([1, 2]),
                 Criterion.static(3)):
        rollout(net, crit, 3)


def test_episode_log_jsonl(tmp_path):
    net = net_of(seed=0)
    log = rollout(net, Criterion.action([0.05, 0.05, 0.05, INF]), 1)[0]
    log.write_jsonl(tmp_path / "e.jsonl")
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == len(log.steps) >= 1
    rec = json.loads(lines[0])
    assert set(rec) == {"t", "exit", "flops_backbone", "flops_head", "delta", "action", "ns"}
    assert rec["t"] == 0 and len(rec["action"]["pose"]) == 6
    assert [json.loads(x)["t"] for x in lines] == list(range(len(lines)))


def test_head_state_starts_at_zero_for_each_episode():
    net = net_of(seed=5)
    a = rollout(net, Criterion.static(2), 3)
    b = rollout(net, Criterion.static(2), 3)
    assert actions_of(a) == actions_of(b)


# ---------------------------------------------------------------- calibration


@pytest.fixture(scope="module")
def few_episodes():
    return E.generate_dataset(E.DatasetConfig(n_episodes=6, splits="D"), 2)[0]


def test_calibration_scores_shape_and_ranges(few_episodes):
    net = net_of(seed=0)
    S = sum(len(e) for e in few_episodes)
    act = P.collect_calibration_scores(net, few_episodes, "action", chunk=4)
    feat = P.collect_calibration_scores(net, few_episodes, "feature", chunk=4)
    assert act.shape == feat.shape == (S, 4)
    assert np.all(act >= 0)
    assert np.all((feat >= -1e-12) & (feat <= 2 + 1e-12))
    with pytest.raises(ValueError):
        P.collect_calibration_scores(net, few_episodes, "time")


def test_first_step_scores_match_a_full_depth_decision(few_episodes):
    net = net_of(seed=0)
    ep = few_episodes[0]
    scores = P.collect_calibration_scores(net, [ep], "action")
    cache = net.start_cache(np.array([ep.instruction.tokens]), ep.obs[:1])
    dec = P.decide_exit_action_consistency(net, cache, net.init_state(1), [0.0, 0.0, 0.0, INF], 4)
    np.testing.assert_allclose(scores[0], dec.deltas[0], rtol=0, atol=1e-12)
