"""Command line front end.

Three subcommands:

  run     simulate one scenario, write report.json / events.jsonl /
          summary.csv (and orchestration.json for multi-device scenarios
          with orchestration enabled)
  sweep   run a scenario across axes x seeds, write sweep.csv plus
          plot_<metric>.json series files
  verify  run the two theorem harnesses and report pass/fail

Every invocation that touches an output directory writes manifest.json
first: argv, scenario digest, package version. Nothing in any output
carries a timestamp, so identical invocations produce identical bytes.

Exit codes: 0 success, 2 configuration error, 3 infeasible deployment,
4 unexpected runtime failure. verify exits 1 when a theorem check fails.
The COMOE_LOG environment variable sets the logging level (default
WARNING).
"""

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import traceback

from . import __version__
from . import scenario as scen
from . import simulator as sim
from .errors import ConfigError, InfeasibleError

log = logging.getLogger("comoe")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_RUNTIME = 4

SUMMARY_COLUMNS = [
    "run_id", "method", "preset", "device_id", "seed", "feasible",
    "variant_initial", "variant_final", "tokens", "total_latency_s",
    "comp_latency_s", "comm_latency_s", "predictor_overhead_frac",
    "adjust_overhead_frac", "throughput_tokens_per_s", "peak_mem_gb",
    "avg_mem_bytes", "pmr", "hit_rate", "late_prefetch_count",
    "prefetch_issued", "substitution_count", "expert_load_count",
    "comm_volume_bytes", "failure_count", "switch_count",
]

PLOT_METRICS = ("total_latency_s", "peak_mem_gb", "hit_rate", "pmr")


def _report_row(report, run_id: str, seed) -> dict:
    d = report.to_dict()
    row = {"run_id": run_id, "seed": seed, "feasible": True}
    for col in SUMMARY_COLUMNS:
        if col in ("run_id", "seed", "feasible"):
            continue
        row[col] = d.get(col, "")
    return row


def _infeasible_row(run_id: str, seed, method, preset, reason: str) -> dict:
    row = {col: "" for col in SUMMARY_COLUMNS}
    row.update({"run_id": run_id, "seed": seed, "feasible": False,
                "method": method or "", "preset": preset or ""})
    row["reason"] = reason
    return row


def _write_csv(path: str, rows: list, columns=None) -> None:
    columns = columns or SUMMARY_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c, "")
                             for c in columns])


def _write_json(path: str, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_manifest(out_dir: str, command: str, args, scenario_bytes,
                    extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "scenario_path": getattr(args, "scenario", None),
        "scenario_sha256": _sha256(scenario_bytes)
        if scenario_bytes is not None else None,
        "seed": getattr(args, "seed", None),
        "overrides": list(getattr(args, "set", None) or []),
        "threads": getattr(args, "threads", 1),
    }
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _load_raw_scenario(args):
    """Scenario file bytes and parsed dict with CLI overrides applied."""
    with open(args.scenario, "rb") as fh:
        data = fh.read()
    try:
        raw = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed scenario file {args.scenario}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError("scenario root must be a JSON object")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        scen.apply_override(raw, key.strip(), value)
    if args.seed is not None:
        raw.setdefault("workload", {}).setdefault("routing", {})
        raw["workload"]["routing"]["seed"] = args.seed
    return data, raw


def _set_path(raw: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"sweep axis {dotted}: {part} is not an object")
        node = nxt
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# run


def cmd_run(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    try:
        with open(args.scenario, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_manifest(args.out, "run", args, data)
    data, raw = _load_raw_scenario(args)
    cfg = scen.normalize(raw)
    if args.dump_normalized:
        with open(os.path.join(args.out, "normalized_scenario.json"), "w",
                  encoding="utf-8") as fh:
            fh.write(scen.dump_normalized(cfg))
            fh.write("\n")
    orch_on = cfg["orchestration"]["enabled"] and \
        len(cfg["resources"]["devices"]) >= 2
    try:
        if orch_on:
            return _run_orchestrated(args, cfg)
        report = sim.run_inference(cfg)
    except InfeasibleError as exc:
        log.warning("infeasible: %s", exc)
        _write_json(os.path.join(args.out, "report.json"),
                    {"feasible": False, "reason": str(exc),
                     "scenario": scen.scenario_id(cfg)})
        return EXIT_INFEASIBLE
    _write_json(os.path.join(args.out, "report.json"), report.to_dict())
    sim.write_events_jsonl(report.events,
                           os.path.join(args.out, "events.jsonl"))
    seed = cfg["workload"]["routing"]["seed"]
    row = _report_row(report, run_id=scen.scenario_id(cfg), seed=seed)
    _write_csv(os.path.join(args.out, "summary.csv"), [row])
    log.info("run complete: %s tokens, %.4f s total latency",
             report.tokens, report.total_latency_s)
    return EXIT_OK


def _run_orchestrated(args, cfg: dict) -> int:
    result = sim.orchestrate(cfg)
    payload = {k: v for k, v in result.items() if k != "events"}
    _write_json(os.path.join(args.out, "orchestration.json"), payload)
    sim.write_events_jsonl(result["events"],
                           os.path.join(args.out, "events.jsonl"))
    rows = []
    seed = cfg["workload"]["routing"]["seed"]
    for di, strategy in enumerate(result["strategies"]):
        final = copy.deepcopy(cfg)
        final["resources"]["devices"] = [
            copy.deepcopy(cfg["resources"]["devices"][di])]
        final["offload"]["theta_base"] = strategy["theta_base"]
        final["offload"]["gamma_prio"] = strategy["gamma_prio"]
        final["fusion"]["force_variant"] = strategy["variant"]
        final["orchestration"]["enabled"] = False
        report = sim.run_inference(final)
        device = strategy["device_id"]
        _write_json(os.path.join(args.out, f"report_{device}.json"),
                    report.to_dict())
        rows.append(_report_row(report, run_id=f"{scen.scenario_id(cfg)}-"
                                f"{device}", seed=seed))
    _write_csv(os.path.join(args.out, "summary.csv"), rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep


def _load_sweep_spec(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read sweep spec {path}: {exc}")
    if not isinstance(spec, dict) or "axes" not in spec:
        raise ConfigError("sweep spec must be an object with an 'axes' list")
    axes = spec["axes"]
    if not isinstance(axes, list) or not axes:
        raise ConfigError("sweep spec needs at least one axis")
    for i, axis in enumerate(axes):
        if not isinstance(axis, dict) or "path" not in axis or \
                "values" not in axis:
            raise ConfigError(f"axes[{i}] needs 'path' and 'values'")
        if not isinstance(axis["values"], list) or not axis["values"]:
            raise ConfigError(f"axes[{i}].values must be a non-empty list")
    seeds = spec.get("seeds")
    if seeds is not None and (not isinstance(seeds, list) or not seeds):
        raise ConfigError("sweep seeds must be a non-empty list")
    return spec


def _slug(value) -> str:
    text = str(value)
    return "".join(ch if ch.isalnum() or ch in "._-" else "-"
                   for ch in text)


def _sweep_job(raw_base: dict, axes: list, combo: tuple, seed: int):
    raw = copy.deepcopy(raw_base)
    for axis, value in zip(axes, combo):
        _set_path(raw, axis["path"], value)
    raw.setdefault("workload", {}).setdefault("routing", {})
    raw["workload"]["routing"]["seed"] = seed
    cfg = scen.normalize(raw)
    run_id = "__".join(
        f"{axis['path'].split('.')[-1]}-{_slug(value)}"
        for axis, value in zip(axes, combo)) + f"__s{seed}"
    try:
        report = sim.run_inference(cfg)
    except InfeasibleError as exc:
        return run_id, _infeasible_row(run_id, seed, cfg["method"],
                                       cfg["model"]["preset"], str(exc))
    return run_id, _report_row(report, run_id=run_id, seed=seed)


def cmd_sweep(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    try:
        with open(args.scenario, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _write_manifest(args.out, "sweep", args, data,
                    extra={"sweep_path": args.sweep})
    _, raw_base = _load_raw_scenario(args)
    spec = _load_sweep_spec(args.sweep)
    axes = spec["axes"]
    if args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = spec.get("seeds") or [
            raw_base.get("workload", {}).get("routing", {}).get("seed", 2024)]
    combos = list(itertools.product(*[axis["values"] for axis in axes]))
    jobs = [(combo, seed) for combo in combos for seed in seeds]
    log.info("sweep: %d combos x %d seeds = %d runs",
             len(combos), len(seeds), len(jobs))

    results = {}
    if args.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(
                max_workers=args.threads) as pool:
            futures = {pool.submit(_sweep_job, raw_base, axes, combo, seed):
                       (combo, seed) for combo, seed in jobs}
            for fut in concurrent.futures.as_completed(futures):
                run_id, row = fut.result()
                results[run_id] = row
    else:
        for combo, seed in jobs:
            run_id, row = _sweep_job(raw_base, axes, combo, seed)
            results[run_id] = row

    rows = [results[k] for k in sorted(results)]
    columns = SUMMARY_COLUMNS + ["reason"]
    _write_csv(os.path.join(args.out, "sweep.csv"), rows, columns)
    _write_plot_data(args.out, axes, seeds, combos, results)
    return EXIT_OK


def _write_plot_data(out_dir: str, axes: list, seeds: list, combos: list,
                     results: dict) -> None:
    """Per-metric series keyed on the last axis, seed-averaged."""
    x_axis = axes[-1]
    lead_axes = axes[:-1]
    for metric in PLOT_METRICS:
        series = []
        lead_combos = list(itertools.product(
            *[axis["values"] for axis in lead_axes])) or [()]
        for lead in lead_combos:
            label = "/".join(_slug(v) for v in lead) or "all"
            xs, ys = [], []
            for x_val in x_axis["values"]:
                combo = tuple(lead) + (x_val,)
                vals = []
                for seed in seeds:
                    run_id = "__".join(
                        f"{axis['path'].split('.')[-1]}-{_slug(v)}"
                        for axis, v in zip(axes, combo)) + f"__s{seed}"
                    row = results.get(run_id)
                    if row and row.get("feasible") and \
                            row.get(metric) not in ("", None):
                        vals.append(float(row[metric]))
                xs.append(x_val)
                ys.append(sum(vals) / len(vals) if vals else None)
            series.append({"label": label, "x": xs, "y": ys})
        _write_json(os.path.join(out_dir, f"plot_{metric}.json"),
                    {"metric": metric, "x_axis": x_axis["path"],
                     "series": series})


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    t2_seeds = 12 if args.quick else 50
    t1 = sim.theorem1_harness(seed=seed)
    t2 = sim.theorem2_harness(seeds=t2_seeds, base_seed=3000 + seed)
    print(f"granularity adaptation: "
          f"{'PASS' if t1['pass'] else 'FAIL'} "
          f"(fail_dyn={t1['fail_rate_dynamic']:.4f} "
          f"fail_fixed={t1['fail_rate_fixed']:.4f} p={t1['p_value']:.3g})")
    print(f"prefetch threshold ordering: "
          f"{'PASS' if t2['pass'] else 'FAIL'} "
          f"(ordered={t2['ordered_fraction']:.2f} "
          f"hit_dyn={t2['means']['dynamic']['hit_rate']:.4f} "
          f"hit_fixed={t2['means']['fixed']['hit_rate']:.4f} "
          f"hit_none={t2['means']['none']['hit_rate']:.4f})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_manifest(args.out, "verify", args, None)
        t2_out = dict(t2)
        t2_out.pop("per_seed", None)
        _write_json(os.path.join(args.out, "verify.json"),
                    {"theorem1": t1, "theorem2": t2_out})
    return EXIT_OK if (t1["pass"] and t2["pass"]) else 1


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="comoe",
        description="Desk-scale simulator for collaborative MoE "
                    "aggregation and offloading on edge devices.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True):
        if scenario_required:
            p.add_argument("--scenario", required=True,
                           help="scenario JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override workload.routing.seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key (dotted path)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (sweep only)")

    p_run = sub.add_parser("run", help="simulate one scenario")
    common(p_run)
    p_run.add_argument("--dump-normalized", action="store_true",
                       help="also write the normalized scenario")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario grid")
    common(p_sweep)
    p_sweep.add_argument("--sweep", required=True, help="sweep spec JSON")
    p_sweep.set_defaults(func=cmd_sweep)

    p_verify = sub.add_parser("verify", help="check the theorem claims")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.add_argument("--out", default=None,
                          help="optional directory for verify.json")
    p_verify.add_argument("--quick", action="store_true",
                          help="fewer harness seeds")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("COMOE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception:
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
