"""Tier state machine, policies, predictor training.

The eviction hypothesis block and the 20k-event fuzz lean on oracles.py;
the longer 100k fuzz lives in the acceptance suite.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from comoe.errors import ConfigError, InfeasibleError
from comoe.moe import MoeModelSpec, RoutingGeneratorSpec, collect_stats, \
    generate_routing
from comoe.offload import (CACHE, HOST, WORKSPACE, CacheState, OffloadPolicy,
                           build_cache_state, build_training_samples,
                           correct_misprediction, decide_prefetch,
                           evict, eviction_score, frequency_baseline,
                           mlp_from_json, mlp_to_json, offload_priority,
                           plan_initial_placement, predict_next_layer,
                           prefetch_threshold, train_predictor)


def small_state(**kw):
    state = CacheState(workspace_capacity=kw.pop("ws", 10.0),
                       cache_capacity=kw.pop("ca", 10.0), **kw)
    return state


# ---------------------------------------------------------------------------
# CacheState


def test_tier_membership_and_moves():
    s = small_state()
    s.workspace[(1, 0)] = 4.0
    s.cache[(1, 1)] = 3.0
    s.host[(1, 2)] = 5.0
    assert s.tier_of((1, 0)) == WORKSPACE
    assert s.tier_of((1, 1)) == CACHE
    assert s.tier_of((1, 2)) == HOST
    assert s.size_of((1, 2)) == 5.0
    assert s.resident((1, 0)) and s.resident((1, 1))
    assert not s.resident((1, 2))
    assert s.bytes_used(WORKSPACE) == 4.0
    assert s.free_bytes(CACHE) == 7.0
    assert s.resident_bytes() == 7.0
    assert s.gpu_resident_ids() == [(1, 0), (1, 1)]

    s.move((1, 2), HOST, CACHE)
    assert s.tier_of((1, 2)) == CACHE
    assert s.bytes_used(CACHE) == 8.0
    with pytest.raises(KeyError):
        s.move((1, 2), HOST, CACHE)
    with pytest.raises(KeyError):
        s.tier_of((9, 9))
    with pytest.raises(KeyError):
        s.size_of((9, 9))
    with pytest.raises(KeyError):
        s._tier("vram")


def test_record_access_half_life():
    s = small_state(half_life=2.0)
    eid = (1, 0)
    s.record_access(eid, 0)
    assert s.recent_value(eid, 0) == 1.0
    assert s.recent_value(eid, 2) == pytest.approx(0.5, rel=1e-12)
    assert s.recent_value(eid, 4) == pytest.approx(0.25, rel=1e-12)
    # recent_value does not mutate
    assert s.recent_access[eid] == (1.0, 0)
    s.record_access(eid, 2)
    assert s.recent_access[eid][0] == pytest.approx(1.5, rel=1e-12)
    assert s.recent_value((9, 9), 5) == 0.0


def test_check_invariants_catches_corruption():
    s = small_state()
    s.workspace[(1, 0)] = 4.0
    s.cache[(1, 0)] = 4.0
    with pytest.raises(AssertionError):
        s.check_invariants()

    s = small_state(ca=5.0)
    s.cache[(1, 0)] = 6.0
    with pytest.raises(AssertionError):
        s.check_invariants()

    s = small_state()
    s.host[(1, 0)] = 1.0
    s.pinned.add((1, 0))
    with pytest.raises(AssertionError):
        s.check_invariants()

    s = small_state()
    s.workspace[(1, 0)] = 4.0
    s.check_invariants()


# ---------------------------------------------------------------------------
# Policy scalar functions


def test_prefetch_threshold_modes():
    pol = OffloadPolicy(theta_base=0.5, delta_pref=0.5, gamma_cachethr=0.6)
    # frac = 4/8 = .5 everywhere below
    pol.threshold_mode = "constant"
    assert prefetch_threshold(pol, 0.8, 4e9, 8e9) == 0.5
    pol.threshold_mode = "resource-aware"
    assert prefetch_threshold(pol, 0.8, 4e9, 8e9) == \
        pytest.approx(0.5, rel=1e-12)  # .5 * .8 * 1.25
    pol.threshold_mode = "storage-fraction"
    assert prefetch_threshold(pol, 0.8, 4e9, 8e9) == \
        pytest.approx(0.3, rel=1e-12)
    pol.threshold_mode = "resource-aware"
    pol.conservative_stability = True
    assert prefetch_threshold(pol, 0.8, 4e9, 8e9) == \
        pytest.approx(0.78125, rel=1e-12)  # .5 * 1.25 / .8
    pol.conservative_stability = False
    pol.theta_base = 2.0
    assert prefetch_threshold(pol, 1.0, 8e9, 8e9) == 1.0
    with pytest.raises(ValueError):
        prefetch_threshold(pol, 0.8, 4e9, 0.0)


def test_policy_validation():
    with pytest.raises(ConfigError):
        OffloadPolicy(gamma_prio=1.5).validate()
    with pytest.raises(ConfigError):
        OffloadPolicy(theta_base=-0.1).validate()
    with pytest.raises(ConfigError):
        OffloadPolicy(threshold_mode="sometimes").validate()
    OffloadPolicy().validate()


def test_eviction_score_formula():
    got = eviction_score(0.3, 0.5, 0.8, 0.4, 0.6)
    want = 0.6 * 0.7 + 0.4 * (0.6 / 0.5 + 0.4 / 0.8)
    assert got == pytest.approx(want, rel=1e-12)
    # floors keep cold/weightless experts finite but huge
    floored = eviction_score(0.0, 0.0, 0.0, 1.0, 0.5)
    assert floored == pytest.approx(0.5 / 1e-6 + 0.5 / 1e-6, rel=1e-9)


def test_offload_priority_oracle():
    got = offload_priority(0.2, 10.0, 2.0, 0.6, 10.0)
    assert got == pytest.approx(0.32, rel=1e-12)
    with pytest.raises(ValueError):
        offload_priority(0.2, 10.0, 0.0, 0.6, 10.0)
    with pytest.raises(ValueError):
        offload_priority(0.2, 10.0, 2.0, 0.6, 0.0)


# ---------------------------------------------------------------------------
# Prefetch selection


def prefetch_state(cache_entries=(), pinned=(), ca=10.0):
    s = small_state(ca=ca)
    for eid, size in cache_entries:
        s.cache[eid] = size
    s.pinned = set(pinned)
    for slot in range(8):
        eid = (5, slot)
        if eid not in s.cache:
            s.host[eid] = 1.0
    return s


def test_decide_prefetch_ordering_and_budget():
    s = prefetch_state()
    probs = np.array([0.9, 0.8, 0.7, 0.2, 0.0, 0.0, 0.0, 0.0])
    sizes = {(5, i): 1.0 for i in range(8)}
    assert decide_prefetch(probs, 0.6, s, 5, sizes, budget_bytes=2.0) == \
        [(5, 0), (5, 1)]
    assert decide_prefetch(probs, 0.6, s, 5, sizes, budget_bytes=50.0) == \
        [(5, 0), (5, 1), (5, 2)]
    assert decide_prefetch(probs, 0.6, s, 5, sizes, exclude={(5, 0)},
                           budget_bytes=2.0) == [(5, 1), (5, 2)]
    # strict inequality: p == theta is not above the threshold
    assert decide_prefetch(np.array([0.6] * 8), 0.6, s, 5, sizes,
                           budget_bytes=50.0) == []


def test_decide_prefetch_skips_resident_and_oversized():
    s = prefetch_state(cache_entries=[((5, 0), 1.0)])
    probs = np.array([0.9, 0.8, 0.7, 0.65, 0.0, 0.0, 0.0, 0.0])
    sizes = {(5, i): 1.0 for i in range(8)}
    sizes[(5, 1)] = 5.0  # too big for the budget; later picks still land
    got = decide_prefetch(probs, 0.6, s, 5, sizes, budget_bytes=2.0)
    assert got == [(5, 2), (5, 3)]


def test_decide_prefetch_default_budget():
    # free 5 + unpinned 2: slot sizes of 3 + 3 fit, a third does not
    s = prefetch_state(cache_entries=[((5, 6), 3.0), ((5, 7), 2.0)],
                       pinned=[(5, 6)], ca=10.0)
    probs = np.array([0.9, 0.8, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0])
    sizes = {(5, i): 3.0 for i in range(8)}
    assert decide_prefetch(probs, 0.5, s, 5, sizes) == [(5, 0), (5, 1)]


# ---------------------------------------------------------------------------
# Eviction


def test_evict_simple_cases():
    s = small_state(ca=10.0)
    s.cache = {(1, 0): 4.0, (1, 1): 4.0}
    assert evict(s, 2.0, {}) == []
    victims = evict(s, 5.0, {(1, 0): 1.0, (1, 1): 2.0})
    assert victims == [(1, 1)]
    assert s.cache == {(1, 0): 4.0, (1, 1): 4.0}  # no mutation
    s.pinned = {(1, 1)}
    with pytest.raises(InfeasibleError):
        evict(s, 7.0, {(1, 0): 1.0, (1, 1): 2.0})
    with pytest.raises(InfeasibleError):
        evict(s, 11.0, {})


@settings(max_examples=300, deadline=None)
@given(data=st.data())
def test_evict_matches_exhaustive_oracle(data):
    n = data.draw(st.integers(1, 8))
    sizes = [data.draw(st.floats(0.5, 3.0)) for _ in range(n)]
    cap = data.draw(st.floats(4.0, 12.0))
    s = small_state(ca=cap)
    in_cache = []
    used = 0.0
    for i, size in enumerate(sizes):
        eid = (1, i)
        if used + size <= cap and data.draw(st.booleans()):
            s.cache[eid] = size
            used += size
            in_cache.append(eid)
        else:
            s.host[eid] = size
    for eid in in_cache:
        if data.draw(st.booleans()):
            s.pinned.add(eid)
    scores = {eid: data.draw(st.floats(0.0, 5.0)) for eid in in_cache}
    needed = data.draw(st.floats(0.0, cap * 1.3))

    expected = oracles.eviction_victims(s, needed, scores)
    before = dict(s.cache)
    if expected is None:
        with pytest.raises(InfeasibleError):
            evict(s, needed, scores)
    else:
        assert evict(s, needed, scores) == expected
    assert s.cache == before


def test_cache_fuzz_20k():
    counts = oracles.run_cache_fuzz(20000, seed=1)
    # the run has to actually exercise every operation class
    for op in ("prefetch", "demand", "demote", "evict", "pin", "unpin"):
        assert counts[op] > 0, counts


# ---------------------------------------------------------------------------
# Placement


def test_plan_initial_placement_popularity_fill():
    sizes = {("a"): 4.0, ("b"): 4.0, ("c"): 4.0}
    freqs = {"a": 0.5, "b": 0.3, "c": 0.2}
    plan = plan_initial_placement(sizes, freqs, workspace_capacity=5.0,
                                  cache_capacity=4.0)
    assert plan.order == ["a", "b", "c"]
    assert plan.assignment == {"a": WORKSPACE, "b": CACHE, "c": HOST}
    assert plan.eta_gs == 2


def test_plan_initial_placement_pinned_first():
    sizes = {"a": 4.0, "b": 4.0, "c": 4.0}
    freqs = {"a": 0.5, "b": 0.3, "c": 0.2}
    plan = plan_initial_placement(sizes, freqs, 5.0, 4.0, pinned={"c"})
    assert plan.assignment == {"c": CACHE, "a": WORKSPACE, "b": HOST}
    assert plan.eta_gs == 2
    with pytest.raises(InfeasibleError):
        plan_initial_placement(sizes, freqs, 5.0, 4.0, pinned={"b", "c"})
    with pytest.raises(InfeasibleError):
        plan_initial_placement(sizes, freqs, 5.0, 4.0, working_set_bytes=6.0)
    with pytest.raises(ValueError):
        plan_initial_placement(sizes, freqs, 0.0, 4.0)


def test_build_cache_state_from_plan():
    sizes = {(1, 0): 4.0, (1, 1): 4.0, (1, 2): 4.0}
    freqs = {(1, 0): 0.5, (1, 1): 0.3, (1, 2): 0.2}
    plan = plan_initial_placement(sizes, freqs, 5.0, 4.0, pinned={(1, 1)})
    state = build_cache_state(plan, sizes, 5.0, 4.0, pinned={(1, 1)},
                              importance={(1, 0): 0.9}, half_life=64.0)
    assert state.tier_of((1, 0)) == WORKSPACE
    assert state.tier_of((1, 1)) == CACHE
    assert state.tier_of((1, 2)) == HOST
    assert state.pinned == {(1, 1)}
    assert state.importance == {(1, 0): 0.9}
    assert state.half_life == 64.0
    state.check_invariants()


# ---------------------------------------------------------------------------
# Misprediction correction


def correction_state():
    s = small_state()
    s.cache[(3, 1)] = 1.0
    s.cache[(3, 2)] = 1.0
    s.cache[(4, 0)] = 1.0
    s.host[(3, 0)] = 1.0
    return s


def test_correct_misprediction_substitutes_best_same_layer():
    s = correction_state()
    sims = {(3, 1): 0.85, (3, 2): 0.95, (4, 0): 0.99}
    pol = OffloadPolicy(substitution_sim_min=0.8)
    d = correct_misprediction((3, 0), s, lambda n, e: sims[e], pol)
    assert d.action == "substitute"
    assert d.expert == (3, 2)  # (4, 0) is another layer, ignored
    assert d.penalty == pytest.approx(0.05, rel=1e-9)


def test_correct_misprediction_fetch_paths():
    s = correction_state()
    pol = OffloadPolicy(substitution_sim_min=0.8)
    # nothing similar enough
    d = correct_misprediction((3, 0), s, lambda n, e: 0.5, pol)
    assert d.action == "fetch" and d.expert == (3, 0)
    # high priority always fetches, similarity never consulted
    d = correct_misprediction((3, 0), s, None, pol, priority=0.95,
                              priority_threshold=0.9)
    assert d.action == "fetch"
    with pytest.raises(ValueError):
        correct_misprediction((3, 1), s, lambda n, e: 1.0, pol)


# ---------------------------------------------------------------------------
# Predictor


MODEL = MoeModelSpec(total_layers=12, encoder_moe_layers=(1, 3, 5, 7, 9, 11),
                     decoder_moe_layers=(), experts_per_layer=8,
                     expert_size_bytes=1e6, top_k=1, expert_param_dim=8)


def routing(n, rho, skew, seed, structure_seed=3):
    gs = RoutingGeneratorSpec(skew=skew, rho=rho, seed=seed,
                              structure_seed=structure_seed)
    return generate_routing(gs, MODEL, n)


def test_build_training_samples_layout():
    trace = routing(10, rho=0.9, skew=1.0, seed=0)
    X, y = build_training_samples(trace)
    assert X.shape == (10 * 5, 8 + 16 + 8)
    tok = trace.tokens[0]
    row = X[0]
    onehot = np.zeros(8)
    onehot[tok.layer_experts[1][0]] = 1.0
    assert np.array_equal(row[:8], onehot)
    assert np.array_equal(row[8:24], tok.embedding)
    assert np.array_equal(row[24:], tok.context)
    assert y[0] == tok.layer_experts[3][0]


def test_training_samples_top_k():
    spec2 = MoeModelSpec(total_layers=12, encoder_moe_layers=(1, 3, 5),
                         decoder_moe_layers=(), experts_per_layer=8,
                         expert_size_bytes=1e6, top_k=2, expert_param_dim=8)
    trace = generate_routing(RoutingGeneratorSpec(seed=1), spec2, 7)
    X, y = build_training_samples(trace)
    assert X.shape[0] == 7 * 2 * 2  # pairs * K targets each
    assert X[0, :8].sum() == 2.0


def test_predictor_perfect_on_deterministic_routing():
    """rho=1 with flat skew is a pure bijection; the MLP must nail it."""
    train = routing(1500, rho=1.0, skew=0.0, seed=42)
    mlp, metrics = train_predictor(train, hidden_dim=32, lr=0.05, epochs=8,
                                   seed=5)
    held_out = routing(400, rho=1.0, skew=0.0, seed=777)
    X, y = build_training_samples(held_out)
    probs, _, _ = mlp.forward_batch(X)
    top1 = float((probs.argmax(axis=1) == y).mean())
    assert top1 == 1.0
    assert metrics["samples"] == 1500 * 5
    assert metrics["val_top1"] > 0.99


def test_predict_next_layer_validation():
    train = routing(60, rho=0.9, skew=1.0, seed=2)
    mlp, _ = train_predictor(train, hidden_dim=8, lr=0.05, epochs=1, seed=0)
    p = predict_next_layer(mlp, (3,), np.zeros(16), np.zeros(8))
    assert p.shape == (8,)
    assert p.sum() == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        predict_next_layer(mlp, (9,), np.zeros(16), np.zeros(8))
    with pytest.raises(ValueError):
        predict_next_layer(mlp, (3,), np.zeros(5), np.zeros(8))


def test_mlp_json_roundtrip_exact():
    train = routing(80, rho=0.9, skew=1.0, seed=4)
    mlp, _ = train_predictor(train, hidden_dim=8, lr=0.05, epochs=1, seed=3)
    back = mlp_from_json(mlp_to_json(mlp))
    assert np.array_equal(back.w1, mlp.w1)
    assert np.array_equal(back.b1, mlp.b1)
    assert np.array_equal(back.w2, mlp.w2)
    assert np.array_equal(back.b2, mlp.b2)
    assert back.input_dim == mlp.input_dim == 8 + 16 + 8
    x = np.zeros((1, mlp.input_dim))
    assert np.array_equal(back.forward_batch(x)[0], mlp.forward_batch(x)[0])


def test_frequency_baseline():
    trace = routing(300, rho=0.0, skew=1.5, seed=6)
    stats = collect_stats(trace)
    probs = frequency_baseline(stats, 3)
    assert np.array_equal(probs, stats.freqs(3))
    with pytest.raises(ValueError):
        frequency_baseline(stats, 2)


def test_train_predictor_rejects_empty():
    trace = routing(5, rho=0.9, skew=1.0, seed=0)
    trace.tokens = []
    with pytest.raises(ValueError):
        train_predictor(trace)
