"""End-to-end acceptance checks.

Each test prints one `criterion NN: PASS/FAIL (...)` line, so a plain
pytest run doubles as the acceptance checklist. The fixtures under
scenarios/ are part of the contract; the expected deployability grids
and the memory-ratio band are asserted, not recomputed.
"""

import copy
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as scistats

import oracles
from comoe import aggregation, moe, offload, perfmodel
from comoe import scenario as scen
from comoe import simulator as sim
from comoe.cli import main as cli_main
from comoe.errors import InfeasibleError

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def outcome(num: int, passed: bool, detail: str) -> None:
    print(f"criterion {num:02d}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, detail


def load_scenario(name: str) -> dict:
    with open(SCENARIOS / name) as fh:
        return json.load(fh)


def run_scenario(name: str):
    return sim.run_inference(scen.normalize(load_scenario(name)))


# ---------------------------------------------------------------------------
# 1. memory reduction on the largest preset


def test_criterion_01_memory_reduction():
    t0 = time.perf_counter()
    rc = run_scenario("switch_base_128_comoe.json")
    ro = run_scenario("switch_base_128_original.json")
    ratio = rc.peak_mem_gb / ro.peak_mem_gb
    wall = time.perf_counter() - t0
    passed = 0.2513 <= ratio <= 0.3513 and wall < 60.0
    outcome(1, passed,
            f"peak ratio {ratio:.4f} ({rc.peak_mem_gb:.2f} GB / "
            f"{ro.peak_mem_gb:.2f} GB), band [0.2513, 0.3513], "
            f"wall {wall:.1f}s")


# ---------------------------------------------------------------------------
# 2. latency advantage over offload-only across seeds


def test_criterion_02_latency_vs_offload_only():
    latencies = {}
    for name, method in (("switch_base_32_comoe.json", "comoe"),
                         ("switch_base_32_eoffload.json", "eoffload")):
        cfg = scen.normalize(load_scenario(name))
        pieces = sim.build_runtime(cfg)
        vals = []
        for i in range(10):
            c = copy.deepcopy(cfg)
            c["workload"]["routing"]["seed"] = 9000 + i
            vals.append(sim.run_inference(c, reuse=pieces).total_latency_s)
        latencies[method] = np.array(vals)
    lc, le = latencies["comoe"], latencies["eoffload"]
    margin = (le.mean() - lc.mean()) / le.mean()
    wins = int(np.sum(le > lc))
    p = scistats.binomtest(wins, 10, 0.5, alternative="greater").pvalue
    passed = margin >= 0.05 and p < 0.05
    outcome(2, passed,
            f"margin {margin:.4f} (>= 0.05), wins {wins}/10, "
            f"sign test p {p:.4g} (< 0.05)")


# ---------------------------------------------------------------------------
# 3. granularity adaptation monte carlo


def test_criterion_03_granularity_monte_carlo():
    t0 = time.perf_counter()
    out = sim.theorem1_harness(trials=100000)
    wall = time.perf_counter() - t0
    passed = (out["pass"] and
              out["fail_rate_dynamic"] <= out["fail_rate_fixed"] and
              wall < 10.0)
    outcome(3, passed,
            f"fail_dyn {out['fail_rate_dynamic']:.4f} <= "
            f"fail_fixed {out['fail_rate_fixed']:.4f}, "
            f"p {out['p_value']:.3g} (alpha {out['alpha']}), "
            f"wall {wall:.1f}s")


# ---------------------------------------------------------------------------
# 4. prefetch threshold ordering


def test_criterion_04_threshold_ordering():
    t0 = time.perf_counter()
    out = sim.theorem2_harness(seeds=50)
    wall = time.perf_counter() - t0
    passed = (out["pass"] and out["ordered_fraction"] >= 0.9 and
              out["hit_ordered"] and wall < 120.0)
    outcome(4, passed,
            f"ordered {out['ordered_fraction']:.2f} (>= 0.90), "
            f"hit ordering {out['hit_ordered']}, "
            f"p_fix_none {out['sign_fixed_vs_none']['p_value']:.3g}, "
            f"wall {wall:.1f}s")


# ---------------------------------------------------------------------------
# 5. deployability grids


DEPLOY_METHODS = ["original", "msmoe", "eoffload", "comoe"]
DEPLOY_EXPECTED = {
    8: {"sb8": "oooo", "sb32": "xooo", "sb64": "xooo",
        "sb128": "xooo", "sb256": "xxxx"},
    4: {"sb8": "oooo", "sb32": "xooo", "sb64": "xoxo",
        "sb128": "xxxx"},
}


def deploy_cell(method: str, preset: str, mem_gb: int) -> str:
    raw = load_scenario(f"deploy_base_{mem_gb}gb.json")
    raw["method"] = method
    raw["model"] = {"preset": preset}
    cfg = scen.normalize(raw)
    try:
        report = sim.run_inference(cfg)
    except InfeasibleError:
        return "x"
    return "o" if report.failure_count == 0 else "x"


def test_criterion_05_deployability_tables():
    mismatches = []
    cells = 0
    for mem_gb, rows in DEPLOY_EXPECTED.items():
        for preset, want in rows.items():
            got = "".join(deploy_cell(m, preset, mem_gb)
                          for m in DEPLOY_METHODS)
            cells += len(want)
            if got != want:
                mismatches.append(f"{mem_gb}GB/{preset}: {got} != {want}")
    outcome(5, not mismatches,
            f"{cells} cells across 8GB and 4GB grids"
            + ("" if not mismatches else "; " + "; ".join(mismatches)))


# ---------------------------------------------------------------------------
# 6. fusion math against brute force


R_GRID = (0.25, 0.4, 0.5, 0.75, 1.0)
THETA_GRID = (0.0, 0.1, 0.3)
DELTA_GRID = (0.0, 0.2, 0.3)


def test_criterion_06_fusion_brute_force():
    cases = 1000
    for seed in range(cases):
        E = 2 + seed % 7
        spec, model, stats, calib = oracles.make_layer_case(seed, E)
        freqs = stats.freqs(1)

        h, hbar = aggregation.layer_entropy(stats, 1)
        assert h == pytest.approx(oracles.entropy(freqs),
                                  rel=1e-9, abs=1e-12)

        r = R_GRID[seed % len(R_GRID)]
        theta_act = THETA_GRID[seed % len(THETA_GRID)]
        delta_r = DELTA_GRID[seed % len(DELTA_GRID)]
        assert aggregation.fixed_retention(E, r) == \
            oracles.fixed_retention(E, r)
        assert aggregation.adaptive_retention(E, r, delta_r, hbar, 1) == \
            oracles.adaptive_retention(E, r, delta_r, hbar, 1)

        config = aggregation.FusionConfig(mode="fixed", r=r,
                                          theta_act=theta_act)
        variant = aggregation.fuse_model(model, stats, config,
                                         alpha_sim=0.5, calib=calib)

        target = oracles.fixed_retention(E, r)
        principals = oracles.principals(freqs, target, theta_act)
        assert sorted(variant.retained[1]) == principals
        assert variant.variant_id == config.config_id

        experts = model.layer_experts(1)
        sim_m = moe.similarity_matrix(experts, 0.5, calib)
        ref_assign = oracles.group_assignment(sim_m, principals, E)
        mapping = variant.slot_map[1]
        assert {s: mapping[s] for s in range(E) if s not in principals} == \
            ref_assign
        assert all(mapping[p] == p for p in principals)
        assert sum(1 + len(g.member_slots) for g in variant.groups[1]) == E

        params_by_slot = {e.slot: e.params for e in experts}
        for g in variant.groups[1]:
            slots = (g.principal_slot,) + tuple(g.member_slots)
            ref = oracles.merged_params(slots, freqs, params_by_slot,
                                        aggregation.EPS_FREQ)
            assert np.allclose(variant.retained[1][g.principal_slot].params,
                               ref, rtol=1e-9, atol=1e-12)

        assert variant.expert_bytes == \
            len(principals) * spec.expert_size_bytes
        assert variant.mem_required == variant.expert_bytes
        ref_score = oracles.layer_score(variant.groups[1], freqs, sim_m)
        assert variant.perf_estimate == pytest.approx(ref_score, rel=1e-9)
    outcome(6, True,
            f"{cases} randomized layers, counts exact, params/scores 1e-9")


# ---------------------------------------------------------------------------
# 7. predictor quality


PRED_SPEC = moe.MoeModelSpec(total_layers=12,
                             encoder_moe_layers=(1, 3, 5, 7, 9, 11),
                             decoder_moe_layers=(), experts_per_layer=8,
                             expert_size_bytes=1e6, top_k=1,
                             expert_param_dim=16)


def _mlp_top1(mlp, trace) -> float:
    layers = trace.moe_layer_indices
    hits = total = 0
    for tok in trace.tokens:
        for a, b in zip(layers[:-1], layers[1:]):
            probs = offload.predict_next_layer(mlp, tok.layer_experts[a],
                                               tok.embedding, tok.context)
            hits += int(int(np.argmax(probs)) == tok.layer_experts[b][0])
            total += 1
    return hits / total


def _freq_top1(train_trace, eval_trace) -> float:
    stats = moe.collect_stats(train_trace)
    layers = eval_trace.moe_layer_indices
    hits = total = 0
    for tok in eval_trace.tokens:
        for a, b in zip(layers[:-1], layers[1:]):
            pred = int(np.argmax(offload.frequency_baseline(stats, b)))
            hits += int(pred == tok.layer_experts[b][0])
            total += 1
    return hits / total


def _traces(rho: float, skew: float):
    train = moe.generate_routing(
        moe.RoutingGeneratorSpec(skew=skew, rho=rho, seed=42,
                                 structure_seed=3), PRED_SPEC, 1500)
    held_out = moe.generate_routing(
        moe.RoutingGeneratorSpec(skew=skew, rho=rho, seed=777,
                                 structure_seed=3), PRED_SPEC, 400)
    return train, held_out


def _fd_worst_error() -> float:
    rng = np.random.default_rng(0)
    model = perfmodel.RegressionModel.zeros(learning_rate=1e-3)
    for t in perfmodel.TARGETS:
        model.weights[t] = rng.normal(scale=0.1, size=perfmodel.N_FEATURES)
    fv = perfmodel.FeatureVector(resource=rng.uniform(0.1, 1.0, 4),
                                 config=rng.uniform(0.1, 1.0, 4))
    obs = perfmodel.PredictionTargets(0.5, 0.2, 1.3)
    updated = perfmodel.online_update(model, fv, obs)
    eta = model.learning_rate
    worst = 0.0
    for t in perfmodel.TARGETS:
        analytic = (model.weights[t] - updated.weights[t]) / eta
        for i in range(perfmodel.N_FEATURES):
            h = 1e-4 * max(1.0, abs(model.weights[t][i]))
            wp = {k: v.copy() for k, v in model.weights.items()}
            wm = {k: v.copy() for k, v in model.weights.items()}
            wp[t][i] += h
            wm[t][i] -= h
            fd = (perfmodel.loss(perfmodel.RegressionModel(
                      weights=wp, learning_rate=eta), fv, obs) -
                  perfmodel.loss(perfmodel.RegressionModel(
                      weights=wm, learning_rate=eta), fv, obs)) / (2 * h)
            denom = max(abs(analytic[i]), abs(fd), 1e-8)
            worst = max(worst, abs(analytic[i] - fd) / denom)
    return worst


def test_criterion_07_predictor_quality():
    fd_worst = _fd_worst_error()

    train, held_out = _traces(rho=1.0, skew=0.0)
    mlp, _ = offload.train_predictor(train, hidden_dim=32, lr=0.05,
                                     epochs=8, seed=5)
    exact = _mlp_top1(mlp, held_out)

    train9, held9 = _traces(rho=0.9, skew=1.0)
    mlp9, _ = offload.train_predictor(train9, hidden_dim=32, lr=0.05,
                                      epochs=8, seed=5)
    acc_mlp = _mlp_top1(mlp9, held9)
    acc_freq = _freq_top1(train9, held9)
    gap = acc_mlp - acc_freq

    passed = fd_worst < 1e-4 and exact == 1.0 and gap >= 0.10
    outcome(7, passed,
            f"fd worst rel err {fd_worst:.2e} (< 1e-4), "
            f"rho=1 top1 {exact:.4f} (== 1.0), "
            f"rho=0.9 mlp {acc_mlp:.4f} vs freq {acc_freq:.4f}, "
            f"gap {gap:.3f} (>= 0.10)")


# ---------------------------------------------------------------------------
# 8. cache safety under fuzz plus exhaustive eviction


def test_criterion_08_cache_fuzz_and_eviction():
    counts = oracles.run_cache_fuzz(100000, seed=2024)
    exercised = {k: v for k, v in counts.items() if k != "skipped"}
    assert all(v > 0 for v in exercised.values()), counts

    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(400):
        n = int(rng.integers(1, 9))
        cap = float(rng.uniform(4.0, 12.0))
        state = offload.CacheState(workspace_capacity=10.0,
                                   cache_capacity=cap)
        in_cache = []
        used = 0.0
        for i in range(n):
            eid = (1, i)
            size = float(rng.uniform(0.5, 3.0))
            if used + size <= cap and rng.random() < 0.7:
                state.cache[eid] = size
                used += size
                in_cache.append(eid)
            else:
                state.host[eid] = size
        for eid in in_cache:
            if rng.random() < 0.3:
                state.pinned.add(eid)
        scores = {eid: float(rng.uniform(0.0, 5.0)) for eid in in_cache}
        needed = float(rng.uniform(0.0, 1.3 * cap))
        expected = oracles.eviction_victims(state, needed, scores)
        if expected is None:
            with pytest.raises(InfeasibleError):
                offload.evict(state, needed, scores)
        else:
            assert offload.evict(state, needed, scores) == expected
        checked += 1
    outcome(8, True,
            f"100000 fuzz events clean, {checked} eviction plans match "
            f"the exhaustive oracle")


# ---------------------------------------------------------------------------
# 9. byte-level reproducibility


def test_criterion_09_reproducibility(tmp_path):
    scenario = str(SCENARIOS / "switch_base_32_comoe.json")
    run_args = ["run", "--scenario", scenario, "--seed", "4242",
                "--set", "workload.sequence_length=32",
                "--set", "workload.sequences=1"]
    outs = []
    for name in ("run_a", "run_b"):
        out = tmp_path / name
        assert cli_main(run_args + ["--out", str(out)]) == 0
        outs.append(out)
    run_equal = all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        for f in ("report.json", "events.jsonl", "summary.csv"))

    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps({
        "axes": [
            {"path": "method", "values": ["eoffload", "comoe"]},
            {"path": "model.preset", "values": ["sb8", "sb32"]},
        ],
        "seeds": [2024, 2025],
    }))
    sweep_args = ["sweep", "--scenario",
                  str(SCENARIOS / "deploy_base_8gb.json"),
                  "--sweep", str(spec_path)]
    sweep_outs = []
    for name, threads in (("sw1", "1"), ("sw4", "4")):
        out = tmp_path / name
        assert cli_main(sweep_args + ["--out", str(out),
                                      "--threads", threads]) == 0
        sweep_outs.append(out)
    from comoe.cli import PLOT_METRICS
    sweep_files = ["sweep.csv"] + [f"plot_{m}.json" for m in PLOT_METRICS]
    sweep_equal = all(
        (sweep_outs[0] / f).read_bytes() == (sweep_outs[1] / f).read_bytes()
        for f in sweep_files)

    outcome(9, run_equal and sweep_equal,
            f"two runs byte-identical: {run_equal}; sweep threads 1 vs 4 "
            f"byte-identical: {sweep_equal}")


# ---------------------------------------------------------------------------
# 10. bookkeeping overheads stay small


def test_criterion_10_overhead_fractions():
    report = run_scenario("switch_base_32_comoe.json")
    pf = report.predictor_overhead_frac
    af = report.adjust_overhead_frac
    passed = 0.0 <= pf < 0.05 and 0.0 <= af < 0.05
    outcome(10, passed,
            f"predictor fraction {pf:.4f}, adjust fraction {af:.4f}, "
            f"both < 0.05")
