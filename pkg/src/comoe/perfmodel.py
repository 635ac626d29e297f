"""Resource-aware performance prediction.

Polynomial regression over (resource state, model configuration) features
with online SGD updates, plus the closed-form communication latency for a
single expert transfer. Three targets are learned with independent
coefficient vectors: compute latency, communication latency, memory usage.

The feature map is fixed and documented here because the surrounding
system only names the feature families:

  resource  f = (1/gpu_compute, 1/bw_gpu_cpu, gpu mem available fraction, gpu_util)
  config    g = (retained expert count, expert size, top-k, MoE layer count)

The full vector is [all pairwise f_i*g_j, f, g, 1], so size/bandwidth
style latencies are exactly representable as a single cross-term weight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

RESOURCE_FEATURES = ("inv_gpu_compute", "inv_bw_gpu_cpu",
                     "gpu_mem_avail_frac", "gpu_util")
CONFIG_FEATURES = ("retained_experts", "expert_size", "top_k", "moe_layers")
TARGETS = ("comp_latency", "comm_latency", "mem_usage")

# 1/x features saturate here instead of dividing by zero.
RECIPROCAL_CAP = 1e12


def feature_names() -> list:
    names = [f"{f}*{g}" for f in RESOURCE_FEATURES for g in CONFIG_FEATURES]
    names += list(RESOURCE_FEATURES)
    names += list(CONFIG_FEATURES)
    names.append("bias")
    return names


N_FEATURES = len(RESOURCE_FEATURES) * len(CONFIG_FEATURES) + \
    len(RESOURCE_FEATURES) + len(CONFIG_FEATURES) + 1


@dataclass
class FeatureVector:
    resource: np.ndarray
    config: np.ndarray

    def full(self) -> np.ndarray:
        cross = np.outer(self.resource, self.config).ravel()
        return np.concatenate([cross, self.resource, self.config, [1.0]])

    def __len__(self) -> int:
        return self.resource.size * self.config.size + \
            self.resource.size + self.config.size + 1


@dataclass
class ConfigSummary:
    """The slice of a model variant the predictor cares about."""

    retained_experts: int
    expert_size: float
    top_k: int
    moe_layers: int


@dataclass
class PredictionTargets:
    comp_latency: float
    comm_latency: float
    mem_usage: float

    def as_tuple(self):
        return (self.comp_latency, self.comm_latency, self.mem_usage)


def _capped_reciprocal(x: float) -> float:
    if x <= 1.0 / RECIPROCAL_CAP:
        return RECIPROCAL_CAP
    return 1.0 / x


def extract_features(sample, summary: ConfigSummary) -> FeatureVector:
    """Deterministic feature extraction from a resource sample and a config."""
    mem_frac = 0.0
    if sample.gpu_mem_total > 0:
        mem_frac = sample.gpu_mem_available / sample.gpu_mem_total
    resource = np.array([
        _capped_reciprocal(sample.gpu_compute),
        _capped_reciprocal(sample.bw_gpu_cpu),
        mem_frac,
        sample.gpu_util,
    ])
    config = np.array([
        float(summary.retained_experts),
        float(summary.expert_size),
        float(summary.top_k),
        float(summary.moe_layers),
    ])
    return FeatureVector(resource=resource, config=config)


@dataclass
class RegressionModel:
    """Per-target linear coefficients over the polynomial feature vector."""

    weights: dict
    learning_rate: float
    update_count: int = 0
    n_features: int = N_FEATURES

    @classmethod
    def zeros(cls, learning_rate: float = 1e-3,
              n_features: int = N_FEATURES) -> "RegressionModel":
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        return cls(weights={t: np.zeros(n_features) for t in TARGETS},
                   learning_rate=learning_rate, n_features=n_features)


def predict_linear(model: RegressionModel, x: FeatureVector) -> tuple:
    """Raw linear outputs, before the clamp at zero."""
    v = x.full()
    if v.size != model.n_features:
        raise ValueError(
            f"feature length {v.size} does not match model ({model.n_features})")
    return tuple(float(model.weights[t] @ v) for t in TARGETS)


def predict(model: RegressionModel, x: FeatureVector) -> PredictionTargets:
    raw = predict_linear(model, x)
    return PredictionTargets(*(max(0.0, r) for r in raw))


def loss(model: RegressionModel, x: FeatureVector,
         observed: PredictionTargets) -> float:
    """Squared error summed over targets, on the linear output."""
    raw = predict_linear(model, x)
    obs = observed.as_tuple()
    return sum((r - y) ** 2 for r, y in zip(raw, obs))


def online_update(model: RegressionModel, x: FeatureVector,
                  observed: PredictionTargets) -> RegressionModel:
    """One SGD step per target. Returns a new model; rejects bad observations."""
    obs = observed.as_tuple()
    if any(not math.isfinite(y) for y in obs):
        raise ValueError("non-finite observation")
    v = x.full()
    if v.size != model.n_features:
        raise ValueError(
            f"feature length {v.size} does not match model ({model.n_features})")
    eta = model.learning_rate
    if eta <= 0:
        raise ValueError("learning_rate must be positive")
    new_weights = {}
    for t, y in zip(TARGETS, obs):
        w = model.weights[t]
        grad = 2.0 * (float(w @ v) - y) * v
        new_weights[t] = w - eta * grad
    return replace(model, weights=new_weights,
                   update_count=model.update_count + 1)


def comm_latency(expert_size: float, bandwidth: float,
                 resident_in_gpu: bool) -> float:
    """Transfer time for one expert; zero when it is already resident."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    if resident_in_gpu:
        return 0.0
    return expert_size / bandwidth


# ---------------------------------------------------------------------------
# Serialization: flat JSON, feature name -> coefficient, per target.


def model_to_json(model: RegressionModel) -> str:
    names = feature_names()
    doc = {
        "learning_rate": model.learning_rate,
        "update_count": model.update_count,
        "targets": {
            t: {name: float(w) for name, w in zip(names, model.weights[t])}
            for t in TARGETS
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def model_from_json(text: str) -> RegressionModel:
    doc = json.loads(text)
    names = feature_names()
    weights = {}
    for t in TARGETS:
        table = doc["targets"][t]
        weights[t] = np.array([table[name] for name in names])
    return RegressionModel(weights=weights,
                           learning_rate=float(doc["learning_rate"]),
                           update_count=int(doc["update_count"]))
