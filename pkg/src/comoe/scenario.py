"""Scenario schema: defaults, method presets, validation, builders.

A scenario is a plain nested dict. `normalize` fills every default,
expands the optional top-level "method" preset, and rejects unknown keys
with their dotted path. Builders turn sections of a normalized scenario
into the domain objects the simulator consumes.

Normalization is idempotent: normalize(normalize(x)) == normalize(x),
which is what makes --dump-normalized output stable.
"""

import copy
import json

from . import presets
from .aggregation import FusionConfig, SwitchPolicy
from .errors import ConfigError
from .moe import MoeModelSpec, RoutingGeneratorSpec
from .offload import OffloadPolicy
from .resource import METRIC_FIELDS, ResourceSample, ResourceTraceSpec

DEVICE_BASE_DEFAULTS = {
    "gpu_compute": 2.0e10,
    "cpu_compute": 8.0e10,
    "gpu_util": 0.2,
    "cpu_util": 0.3,
    "gpu_mem_total": 8.0e9,
    "cpu_mem_total": 3.2e10,
    "gpu_mem_used": 0.0,
    "cpu_mem_used": 8.0e9,
    "bw_gpu_cpu": 1.6e10,
    "bw_net": 1.0e9,
    "lat_gpu_cpu": 1.0e-4,
    "lat_net": 5.0e-3,
}

DEVICE_DEFAULTS = {
    "device_id": "dev0",
    "trace_seed": None,
    "base": DEVICE_BASE_DEFAULTS,
    "fluctuations": {},
}

DEFAULTS = {
    "method": None,
    "model": {
        "preset": "sb8",
        "total_layers": None,
        "encoder_moe_layers": None,
        "decoder_moe_layers": None,
        "experts_per_layer": None,
        "top_k": None,
        "total_params": None,
        "expert_size_bytes": None,
        "expert_param_dim": 64,
        "bytes_per_param": 2.0,
        "synth_seed": 1234,
        "flops_per_param": 2.0,
        "util_penalty": 0.5,
        "overhead_fraction": 0.1,
        "activation_workspace_bytes": 5.0e8,
        "dense_flops_factor": 0.25,
    },
    "fusion": {
        "enabled": False,
        "series": None,
        "configs": [],
        "scope": "encoder",
        "theta_act": 0.0,
        "e_min": 2,
        "alpha_sim": 0.5,
        "stats_tokens": 2048,
        "calibration_probes": 8,
        "calibration_buckets": 8,
        "calibration_seed": 7,
        "force_variant": None,
        "switch": {
            "lambda_switch": 0.5,
            "switch_cost": 0.05,
            "t_threshold": 8.0,
        },
    },
    "offload": {
        "enabled": False,
        "cache_mode": "fraction_of_variant",
        "cache_fraction": 0.8,
        "cache_bytes": None,
        "workspace_slots": 2,
        "predictor": "mlp",
        "predictor_hidden": 32,
        "predictor_lr": 0.05,
        "predictor_epochs": 6,
        "predictor_seed": 11,
        "predictor_cost_s": 2.0e-5,
        "prefetch": True,
        "threshold_mode": "resource-aware",
        "conservative_stability": False,
        "theta_base": 0.5,
        "delta_pref": 0.5,
        "gamma_cachethr": 0.6,
        "gamma_prio": 0.5,
        "priority_quantile": 0.9,
        "delta_evict": 0.5,
        "lambda_evict": 0.5,
        "recency_half_life": 256.0,
        "substitution": True,
        "substitution_sim_min": 0.8,
        "pin_decoder": True,
    },
    "resources": {
        "alpha_ewma": 0.3,
        "window": 16,
        "usable_fraction": 0.95,
        "s_m_metric": "gpu_mem_available",
        "s_b_metric": "bw_gpu_cpu",
        "heterogeneity_weights": {
            "gpu_compute": 0.4,
            "gpu_mem_available": 0.4,
            "bw_gpu_cpu": 0.2,
        },
        "devices": [DEVICE_DEFAULTS],
    },
    "workload": {
        "sequence_length": 128,
        "sequences": 2,
        "routing": {
            "mode": "generate",
            "trace_file": None,
            "skew": 1.0,
            "rho": 0.9,
            "seed": 2024,
            "structure_seed": 0,
            "embed_dim": 16,
            "context_dim": 8,
        },
    },
    "orchestration": {
        "enabled": False,
        "rounds_max": 5,
        "tol": 1.0e-3,
        "kappa0": 0.5,
        "kappa_decay": 0.4,
        "search_tokens": 32,
        "theta_base_grid": [0.3, 0.5, 0.7],
        "gamma_prio_grid": [0.25, 0.5, 0.75],
        "adjust_cost_s": 2.0e-4,
        "significant_change": 0.15,
        "reeval_interval": 16,
    },
}

# Method presets fill scenario keys the user left unset. "original" runs
# the dense-precision unmodified model; "msmoe" aggregates only; "eoffload"
# offloads only with an LRU-flavored cache and no prediction; "comoe"
# enables both sides plus prediction, substitution and decoder pinning.
METHODS = {
    "original": {
        "model.bytes_per_param": 4.0,
        "fusion.enabled": False,
        "offload.enabled": False,
    },
    "msmoe": {
        "model.bytes_per_param": 2.0,
        "fusion.enabled": True,
        "fusion.series": "fixed",
        "fusion.scope": "both",
        "offload.enabled": False,
    },
    "eoffload": {
        "model.bytes_per_param": 2.0,
        "fusion.enabled": False,
        "offload.enabled": True,
        "offload.cache_mode": "fraction_of_model",
        "offload.cache_fraction": 0.355,
        "offload.predictor": "none",
        "offload.prefetch": False,
        "offload.substitution": False,
        "offload.pin_decoder": False,
        "offload.delta_evict": 1.0,
        "offload.lambda_evict": 1.0,
    },
    "comoe": {
        "model.bytes_per_param": 2.0,
        "fusion.enabled": True,
        "fusion.series": "fixed",
        "fusion.scope": "both",
        "offload.enabled": True,
        "offload.cache_mode": "fraction_of_variant",
        "offload.cache_fraction": 0.8,
        "offload.predictor": "mlp",
        "offload.prefetch": True,
        "offload.substitution": True,
        "offload.pin_decoder": True,
    },
}

FIXED_SERIES = (0.75, 0.5, 0.25)
ADAPTIVE_SERIES = ((0.6, 0.3), (0.4, 0.2), (0.2, 0.1))

_FLUCT_KEYS = {
    "constant": {"value"},
    "sinusoid": {"amplitude", "period", "phase"},
    "random-walk": {"step_stddev", "min", "max"},
    "step-change": {"time", "value"},
}

_CONFIG_KEYS = {"mode", "r", "r_base", "delta_r", "e_min", "theta_act"}


# ---------------------------------------------------------------------------
# Normalization


def _require_dict(value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'scenario'} must be an object, "
                          f"got {type(value).__name__}")


def _merge(defaults: dict, raw: dict, path: str) -> dict:
    """Overlay raw onto defaults, rejecting keys defaults does not know."""
    out = {}
    for key, value in raw.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        default = defaults[key]
        if isinstance(default, dict) and key not in (
                "fluctuations", "heterogeneity_weights"):
            _require_dict(value, dotted)
            out[key] = _merge(default, value, dotted)
        else:
            out[key] = copy.deepcopy(value)
    for key, default in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(default)
    return out


def _normalize_device(raw: dict, index: int) -> dict:
    path = f"resources.devices[{index}]"
    _require_dict(raw, path)
    dev = _merge(DEVICE_DEFAULTS, raw, path)
    if index > 0 and "device_id" not in raw:
        dev["device_id"] = f"dev{index}"
    _require_dict(dev["fluctuations"], f"{path}.fluctuations")
    for metric, fluct in dev["fluctuations"].items():
        if metric == "time" or metric not in METRIC_FIELDS:
            raise ConfigError(
                f"{path}.fluctuations: unknown metric {metric!r}")
        _require_dict(fluct, f"{path}.fluctuations.{metric}")
        kind = fluct.get("model")
        if kind not in _FLUCT_KEYS:
            raise ConfigError(
                f"{path}.fluctuations.{metric}: unknown model {kind!r}")
        extra = set(fluct) - _FLUCT_KEYS[kind] - {"model"}
        if extra:
            raise ConfigError(
                f"{path}.fluctuations.{metric}: unexpected keys "
                f"{sorted(extra)} for model {kind!r}")
    return dev


def _expand_method(raw: dict) -> dict:
    method = raw.get("method")
    if method is None:
        return raw
    if method not in METHODS:
        raise ConfigError(
            f"unknown method {method!r}; choose from {sorted(METHODS)}")
    out = copy.deepcopy(raw)
    for dotted, value in METHODS[method].items():
        parts = dotted.split(".")
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            _require_dict(node, dotted)
        if parts[-1] not in node:
            node[parts[-1]] = value
    return out


def normalize(raw: dict) -> dict:
    """Validated scenario with every default filled in."""
    _require_dict(raw, "")
    expanded = _expand_method(raw)
    cfg = _merge(DEFAULTS, expanded, "")

    model = cfg["model"]
    if model["preset"] is not None and model["preset"] not in presets.PRESETS:
        raise ConfigError(
            f"unknown model preset {model['preset']!r}; "
            f"choose from {presets.preset_names()}")
    if model["bytes_per_param"] <= 0:
        raise ConfigError("model.bytes_per_param must be positive")

    fusion = cfg["fusion"]
    if fusion["series"] not in (None, "fixed", "adaptive", "both"):
        raise ConfigError(
            f"fusion.series must be fixed|adaptive|both, "
            f"got {fusion['series']!r}")
    if not isinstance(fusion["configs"], list):
        raise ConfigError("fusion.configs must be a list")
    for i, entry in enumerate(fusion["configs"]):
        _require_dict(entry, f"fusion.configs[{i}]")
        extra = set(entry) - _CONFIG_KEYS
        if extra:
            raise ConfigError(
                f"fusion.configs[{i}]: unknown keys {sorted(extra)}")

    off = cfg["offload"]
    if off["cache_mode"] not in ("fraction_of_variant", "fraction_of_model",
                                 "absolute"):
        raise ConfigError(f"unknown cache_mode {off['cache_mode']!r}")
    if off["cache_mode"] == "absolute" and off["cache_bytes"] is None:
        raise ConfigError("offload.cache_bytes required for absolute mode")
    if off["cache_mode"] != "absolute" and not (0 < off["cache_fraction"] <= 1):
        raise ConfigError("offload.cache_fraction must be in (0, 1]")
    if off["predictor"] not in ("mlp", "frequency", "oracle", "none"):
        raise ConfigError(f"unknown predictor {off['predictor']!r}")
    if off["workspace_slots"] < 1:
        raise ConfigError("offload.workspace_slots must be >= 1")

    res = cfg["resources"]
    if not (0 < res["alpha_ewma"] <= 1):
        raise ConfigError("resources.alpha_ewma must be in (0, 1]")
    if not (0 < res["usable_fraction"] <= 1):
        raise ConfigError("resources.usable_fraction must be in (0, 1]")
    if res["window"] < 1:
        raise ConfigError("resources.window must be >= 1")
    for name in (res["s_m_metric"], res["s_b_metric"]):
        if name != "gpu_mem_available" and name not in METRIC_FIELDS:
            raise ConfigError(f"unknown smoothing metric {name!r}")
    devices = res["devices"]
    if not isinstance(devices, list) or not devices:
        raise ConfigError("resources.devices must be a non-empty list")
    res["devices"] = [_normalize_device(d, i) for i, d in enumerate(devices)]
    ids = [d["device_id"] for d in res["devices"]]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate device ids: {ids}")

    wl = cfg["workload"]
    if wl["sequence_length"] < 1 or wl["sequences"] < 1:
        raise ConfigError("workload length values must be >= 1")
    if wl["routing"]["mode"] not in ("generate", "file"):
        raise ConfigError(
            f"workload.routing.mode must be generate|file, "
            f"got {wl['routing']['mode']!r}")
    if wl["routing"]["mode"] == "file" and not wl["routing"]["trace_file"]:
        raise ConfigError("workload.routing.trace_file required in file mode")

    orch = cfg["orchestration"]
    if orch["rounds_max"] < 0:
        raise ConfigError("orchestration.rounds_max must be >= 0")
    if orch["tol"] <= 0:
        raise ConfigError("orchestration.tol must be positive")
    if not (0 < orch["significant_change"]):
        raise ConfigError("orchestration.significant_change must be positive")
    if orch["reeval_interval"] < 1:
        raise ConfigError("orchestration.reeval_interval must be >= 1")
    return cfg


def load_scenario(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed scenario JSON {path}: {exc}") from exc
    return normalize(raw)


def apply_override(raw: dict, dotted: str, text: str) -> None:
    """Apply a --set key=value override onto a raw scenario dict.

    The value is parsed as JSON when possible and kept as a string
    otherwise, so --set offload.theta_base=0.3 and --set method=comoe
    both do what they look like.
    """
    if not dotted:
        raise ConfigError("empty override key")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    parts = dotted.split(".")
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(
                f"cannot override {dotted}: {part} is not an object")
        node = nxt
    node[parts[-1]] = value


def dump_normalized(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Builders


def resolved_geometry(cfg: dict) -> dict:
    """Model geometry with preset values and explicit overrides folded in."""
    model = cfg["model"]
    geo = {}
    if model["preset"] is not None:
        geo = presets.preset_geometry(model["preset"])
    for key in ("total_layers", "encoder_moe_layers", "decoder_moe_layers",
                "experts_per_layer", "top_k", "total_params"):
        if model[key] is not None:
            geo[key] = model[key]
    missing = [k for k in ("total_layers", "encoder_moe_layers",
                           "decoder_moe_layers", "experts_per_layer")
               if k not in geo]
    if missing:
        raise ConfigError(f"model geometry incomplete, missing: {missing}")
    geo.setdefault("top_k", 1)
    n_moe = len(geo["encoder_moe_layers"]) + len(geo["decoder_moe_layers"])
    if model["expert_size_bytes"] is not None:
        geo["expert_size_bytes"] = float(model["expert_size_bytes"])
    elif geo.get("total_params"):
        geo["expert_size_bytes"] = presets.expert_size_bytes(
            geo["total_params"], model["bytes_per_param"],
            n_moe, geo["experts_per_layer"])
    else:
        raise ConfigError(
            "model needs expert_size_bytes or total_params to size experts")
    geo["n_moe_layers"] = n_moe
    return geo


def build_model_spec(cfg: dict) -> MoeModelSpec:
    geo = resolved_geometry(cfg)
    spec = MoeModelSpec(
        total_layers=geo["total_layers"],
        encoder_moe_layers=tuple(geo["encoder_moe_layers"]),
        decoder_moe_layers=tuple(geo["decoder_moe_layers"]),
        experts_per_layer=geo["experts_per_layer"],
        expert_size_bytes=geo["expert_size_bytes"],
        top_k=geo["top_k"],
        expert_param_dim=cfg["model"]["expert_param_dim"],
    )
    spec.validate()
    return spec


def model_costs(cfg: dict) -> dict:
    """Derived byte and FLOP constants the simulator charges against."""
    model = cfg["model"]
    geo = resolved_geometry(cfg)
    expert_size = geo["expert_size_bytes"]
    total_expert_bytes = expert_size * geo["n_moe_layers"] * \
        geo["experts_per_layer"]
    m_other = model["overhead_fraction"] * total_expert_bytes
    bpp = model["bytes_per_param"]
    fpp = model["flops_per_param"]
    dense_flops_token = model["dense_flops_factor"] * (m_other / bpp) * fpp
    return {
        "expert_size": expert_size,
        "total_expert_bytes": total_expert_bytes,
        "m_other": m_other,
        "workspace_bytes": model["activation_workspace_bytes"],
        "bytes_per_param": bpp,
        "flops_per_param": fpp,
        "util_penalty": model["util_penalty"],
        "expert_flops": (expert_size / bpp) * fpp,
        "dense_flops_token": dense_flops_token,
        "dense_flops_layer": dense_flops_token / geo["total_layers"],
    }


def build_fusion_configs(cfg: dict) -> list:
    fusion = cfg["fusion"]
    if not fusion["enabled"]:
        return []
    out = []
    series = fusion["series"]
    if series in ("fixed", "both"):
        for r in FIXED_SERIES:
            out.append(FusionConfig(mode="fixed", r=r,
                                    theta_act=fusion["theta_act"],
                                    scope=fusion["scope"]))
    if series in ("adaptive", "both"):
        for r_base, delta_r in ADAPTIVE_SERIES:
            out.append(FusionConfig(mode="adaptive", r_base=r_base,
                                    delta_r=delta_r, e_min=fusion["e_min"],
                                    theta_act=fusion["theta_act"],
                                    scope=fusion["scope"]))
    for entry in fusion["configs"]:
        out.append(FusionConfig(
            mode=entry.get("mode", "fixed"),
            r=entry.get("r", 0.5),
            r_base=entry.get("r_base", 0.5),
            delta_r=entry.get("delta_r", 0.2),
            e_min=entry.get("e_min", fusion["e_min"]),
            theta_act=entry.get("theta_act", fusion["theta_act"]),
            scope=fusion["scope"]))
    seen = set()
    unique = []
    for fc in out:
        fc.validate()
        if fc.config_id not in seen:
            seen.add(fc.config_id)
            unique.append(fc)
    if not unique:
        raise ConfigError(
            "fusion.enabled is true but no series or configs are given")
    return unique


def build_switch_policy(cfg: dict) -> SwitchPolicy:
    sw = cfg["fusion"]["switch"]
    policy = SwitchPolicy(lambda_switch=sw["lambda_switch"],
                          switch_cost=sw["switch_cost"],
                          t_threshold=sw["t_threshold"])
    policy.validate()
    return policy


def build_offload_policy(cfg: dict) -> OffloadPolicy:
    off = cfg["offload"]
    policy = OffloadPolicy(
        gamma_prio=off["gamma_prio"],
        theta_base=off["theta_base"],
        delta_pref=off["delta_pref"],
        gamma_cachethr=off["gamma_cachethr"],
        delta_evict=off["delta_evict"],
        lambda_evict=off["lambda_evict"],
        threshold_mode=off["threshold_mode"],
        conservative_stability=off["conservative_stability"],
        substitution_sim_min=off["substitution_sim_min"],
        priority_quantile=off["priority_quantile"])
    policy.validate()
    return policy


def build_routing_spec(cfg: dict) -> RoutingGeneratorSpec:
    r = cfg["workload"]["routing"]
    spec = RoutingGeneratorSpec(
        skew=r["skew"], rho=r["rho"], seed=r["seed"],
        structure_seed=r["structure_seed"],
        embed_dim=r["embed_dim"], context_dim=r["context_dim"])
    spec.validate()
    return spec


def base_sample(device_cfg: dict) -> ResourceSample:
    sample = ResourceSample(time=0, **device_cfg["base"])
    sample.validate()
    return sample


def build_trace_spec(cfg: dict, device_index: int,
                     length: int) -> ResourceTraceSpec:
    """Trace spec for one device; unseeded devices derive their seed from
    the routing seed so --seed varies the whole environment."""
    dev = cfg["resources"]["devices"][device_index]
    seed = dev["trace_seed"]
    if seed is None:
        seed = cfg["workload"]["routing"]["seed"] + 211 + 17 * device_index
    return ResourceTraceSpec(base=base_sample(dev),
                             fluctuations=copy.deepcopy(dev["fluctuations"]),
                             seed=int(seed), length=length)


def total_tokens(cfg: dict) -> int:
    wl = cfg["workload"]
    return wl["sequence_length"] * wl["sequences"]


def scenario_id(cfg: dict) -> str:
    method = cfg["method"] or "custom"
    preset = cfg["model"]["preset"] or "custom"
    return f"{method}-{preset}"
