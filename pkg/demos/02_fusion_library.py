"""Build a variant library for a small MoE model and pick variants.

Synthesizes the sb8 model, collects routing statistics, fuses the
fixed retention series into a library, then walks a shrinking memory
budget to show which variant the selector keeps choosing.
"""

from comoe import scenario as scen
from comoe import simulator as sim
from comoe.aggregation import select_variant
from comoe.errors import InfeasibleError


def main():
    cfg = scen.normalize({
        "method": "msmoe",
        "model": {"preset": "sb8", "bytes_per_param": 2.0},
        "fusion": {"stats_tokens": 512},
        "workload": {"sequence_length": 16, "sequences": 1},
    })
    pieces = sim.build_runtime(cfg)
    library = pieces["library"]

    print("variant library (sorted by memory):")
    print(f"{'id':>14}  {'retained':>8}  {'expert GB':>9}  {'perf est':>8}")
    for v in library.variants:
        print(f"{v.variant_id:>14}  {v.total_retained:8d}  "
              f"{v.expert_bytes / 1e9:9.3f}  {v.perf_estimate:8.4f}")

    print()
    print("selection under a shrinking budget:")
    for budget_gb in (2.0, 1.2, 0.9, 0.6, 0.4, 0.2):
        try:
            v = select_variant(library, budget_gb * 1e9)
            print(f"  {budget_gb:4.1f} GB -> {v.variant_id} "
                  f"(needs {v.mem_required / 1e9:.3f} GB)")
        except InfeasibleError:
            print(f"  {budget_gb:4.1f} GB -> nothing fits")


if __name__ == "__main__":
    main()
