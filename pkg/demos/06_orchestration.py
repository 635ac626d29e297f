"""Consensus strategy tuning across a small heterogeneous cluster.

Loads the three-device cluster scenario (two Jetson-class boards and
a mini PC with very little GPU memory but a fast CPU link), runs the
orchestration rounds, and prints how the per-device proposals get
damped toward a weighted consensus. The interesting part is the
mini PC: the consensus variant does not fit on it, so it keeps its
own smaller variant while still adopting the shared thresholds.
"""

import json
from pathlib import Path

from comoe import simulator as sim

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" \
    / "edge_cluster_orchestration.json"


def main():
    res = sim.orchestrate(json.loads(SCENARIO.read_text()))

    print("round 0 proposals (each device grid-searches on its own):")
    print(f"{'device':>10}  {'theta':>5}  {'gamma':>5}  {'variant':>10}  "
          f"{'objective s':>11}")
    for p in res["proposals"]:
        print(f"{p['device_id']:>10}  {p['theta_base']:5.2f}  "
              f"{p['gamma_prio']:5.2f}  {p['variant']:>10}  "
              f"{p['objective']:11.4f}")
    print()

    print("heterogeneity scores and consensus weights (inverse-H):")
    for dev in res["weights"]:
        print(f"{dev:>10}  H={res['heterogeneity'][dev]:.3f}  "
              f"w={res['weights'][dev]:.3f}")
    print()

    ref = res["refined"]
    print(f"refined consensus: theta={ref['theta_base']:.2f} "
          f"gamma={ref['gamma_prio']:.2f} variant={ref['variant']}")
    print(f"converged after {res['rounds_used']} round(s), "
          f"deltas={['%.3f' % d for d in res['deltas']]}")
    print()

    print("final per-device strategies:")
    for s in res["strategies"]:
        note = ""
        if s["variant"] != ref["variant"]:
            note = "  <- consensus variant does not fit, keeps its own"
        print(f"{s['device_id']:>10}  theta={s['theta_base']:.2f}  "
              f"gamma={s['gamma_prio']:.2f}  variant={s['variant']}{note}")


if __name__ == "__main__":
    main()
