"""CoMoE: collaborative expert aggregation and offloading, simulated.

A desk-scale model of MoE inference on heterogeneous edge devices.
No GPUs and no real weights; experts are synthetic parameter blocks and
time is charged from analytic cost expressions. The package covers
resource sensing, expert fusion into a variant library, predictive
offloading with cache management, a discrete-event per-token simulator,
and multi-device strategy orchestration.
"""

__version__ = "0.1.0"

from .errors import CoMoEError, ConfigError, InfeasibleError, TraceError
from .resource import (
    DeviceProfile,
    HeterogeneityReport,
    ResourceSample,
    ResourceTraceSpec,
    SmoothedResource,
    ewma_update,
    generate_trace,
    heterogeneity,
    pair_difference,
)
from .perfmodel import (
    ConfigSummary,
    FeatureVector,
    PredictionTargets,
    RegressionModel,
    comm_latency,
    extract_features,
    online_update,
    predict,
)
from .moe import (
    Expert,
    MoeModel,
    MoeModelSpec,
    RoutingGeneratorSpec,
    RoutingTrace,
    collect_stats,
    combined_similarity,
    generate_routing,
    similarity_matrix,
    synthesize_model,
    trace_from_jsonl,
    trace_to_jsonl,
)
from .aggregation import (
    FusionConfig,
    ModelVariant,
    SwitchPolicy,
    VariantLibrary,
    build_library,
    fuse_model,
    granularity_decision,
    library_manifest,
    select_variant,
    should_switch,
    variant_freqs,
)
from .offload import (
    CacheState,
    OffloadPolicy,
    PredictorMLP,
    build_cache_state,
    correct_misprediction,
    decide_prefetch,
    evict,
    eviction_score,
    offload_priority,
    plan_initial_placement,
    prefetch_threshold,
    train_predictor,
)
from .scenario import (
    DEFAULTS,
    METHODS,
    apply_override,
    dump_normalized,
    load_scenario,
    normalize,
    scenario_id,
)
from .presets import PRESETS, preset_geometry, preset_names
from .simulator import (
    SimReport,
    build_runtime,
    compute_pmr,
    orchestrate,
    read_events_jsonl,
    replay_totals,
    run_inference,
    theorem1_harness,
    theorem2_harness,
    write_events_jsonl,
)

__all__ = [
    "__version__",
    "CoMoEError", "ConfigError", "InfeasibleError", "TraceError",
    "DeviceProfile", "HeterogeneityReport", "ResourceSample",
    "ResourceTraceSpec", "SmoothedResource", "ewma_update",
    "generate_trace", "heterogeneity", "pair_difference",
    "ConfigSummary", "FeatureVector", "PredictionTargets",
    "RegressionModel", "comm_latency", "extract_features",
    "online_update", "predict",
    "Expert", "MoeModel", "MoeModelSpec", "RoutingGeneratorSpec",
    "RoutingTrace", "collect_stats", "combined_similarity",
    "generate_routing", "similarity_matrix", "synthesize_model",
    "trace_from_jsonl", "trace_to_jsonl",
    "FusionConfig", "ModelVariant", "SwitchPolicy", "VariantLibrary",
    "build_library", "fuse_model", "granularity_decision",
    "library_manifest", "select_variant", "should_switch", "variant_freqs",
    "CacheState", "OffloadPolicy", "PredictorMLP", "build_cache_state",
    "correct_misprediction", "decide_prefetch", "evict", "eviction_score",
    "offload_priority", "plan_initial_placement", "prefetch_threshold",
    "train_predictor",
    "DEFAULTS", "METHODS", "apply_override", "dump_normalized",
    "load_scenario", "normalize", "scenario_id",
    "PRESETS", "preset_geometry", "preset_names",
    "SimReport", "build_runtime", "compute_pmr", "orchestrate",
    "read_events_jsonl", "replay_totals", "run_inference",
    "theorem1_harness", "theorem2_harness", "write_events_jsonl",
]
