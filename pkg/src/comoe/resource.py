"""Per-device resource state: smoothing, stability, heterogeneity, traces.

A device is described by a multidimensional resource sample (compute,
memory, bandwidth, latency). Raw telemetry is noisy, so decision logic
never looks at raw samples directly; it sees an exponentially smoothed
value plus a stability score derived from a sliding window. Cross-device
differences are condensed into a single heterogeneity score per device.

Synthetic traces make resource dynamism reproducible: each metric gets a
fluctuation model (constant, sinusoid, random walk, step change) and a
seed, and the generated sequence is clamped back into physical ranges.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

# Column order is the export contract; do not reorder.
METRIC_FIELDS = (
    "time",
    "gpu_compute",
    "cpu_compute",
    "gpu_util",
    "cpu_util",
    "gpu_mem_total",
    "cpu_mem_total",
    "gpu_mem_used",
    "cpu_mem_used",
    "bw_gpu_cpu",
    "bw_net",
    "lat_gpu_cpu",
    "lat_net",
)

UTIL_FIELDS = ("gpu_util", "cpu_util")

DEFAULT_ALPHA = 0.3
DEFAULT_WINDOW = 16


@dataclass
class ResourceSample:
    """One snapshot of a device's resource vector at a tick."""

    time: int
    gpu_compute: float
    cpu_compute: float
    gpu_util: float
    cpu_util: float
    gpu_mem_total: float
    cpu_mem_total: float
    gpu_mem_used: float
    cpu_mem_used: float
    bw_gpu_cpu: float
    bw_net: float
    lat_gpu_cpu: float
    lat_net: float

    def validate(self) -> None:
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"non-finite resource metric {name}: {v!r}")
            if v < 0:
                raise ValueError(f"negative resource metric {name}: {v!r}")
        for name in UTIL_FIELDS:
            if getattr(self, name) > 1.0:
                raise ValueError(f"{name} exceeds 1")
        if self.gpu_mem_used > self.gpu_mem_total:
            raise ValueError("gpu_mem_used exceeds gpu_mem_total")
        if self.cpu_mem_used > self.cpu_mem_total:
            raise ValueError("cpu_mem_used exceeds cpu_mem_total")

    @property
    def gpu_mem_available(self) -> float:
        return self.gpu_mem_total - self.gpu_mem_used

    def metric(self, name: str) -> float:
        if name == "gpu_mem_available":
            return self.gpu_mem_available
        if name not in METRIC_FIELDS:
            raise KeyError(f"unknown resource metric {name!r}")
        return getattr(self, name)

    def as_row(self) -> list:
        return [getattr(self, name) for name in METRIC_FIELDS]


@dataclass
class SmoothedResource:
    """EWMA state for one metric: smoothed value, window, stability score.

    stability = 1 - stddev/value, clamped into [0, 1]; stddev is the
    population deviation of the window measured against the current
    smoothed value (not the window mean). Until the window has filled,
    the deviation uses however many samples have been seen.
    """

    value: float
    alpha: float
    window_size: int = DEFAULT_WINDOW
    window: list = field(default_factory=list)
    stddev: float = 0.0
    stability: float = 1.0
    count: int = 0

    @classmethod
    def start(cls, first_sample: float, alpha: float = DEFAULT_ALPHA,
              window_size: int = DEFAULT_WINDOW) -> "SmoothedResource":
        if not (0.0 < alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        if window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not math.isfinite(first_sample):
            raise ValueError("non-finite initial sample")
        sm = cls(value=float(first_sample), alpha=float(alpha),
                 window_size=int(window_size))
        sm.window = [float(first_sample)]
        sm.count = 1
        sm.stddev = 0.0
        sm.stability = 1.0 if sm.value > 0 else 0.0
        return sm


def ewma_update(prev: SmoothedResource, sample: float) -> SmoothedResource:
    """One smoothing step. Returns a new state; `prev` is untouched."""
    if not math.isfinite(sample):
        raise ValueError(f"non-finite sample: {sample!r}")
    if not (0.0 < prev.alpha <= 1.0):
        raise ValueError(f"alpha must be in (0, 1], got {prev.alpha}")
    value = prev.alpha * float(sample) + (1.0 - prev.alpha) * prev.value
    window = (prev.window + [float(sample)])[-prev.window_size:]
    dev = [(x - value) ** 2 for x in window]
    stddev = math.sqrt(sum(dev) / len(dev))
    if value > 0:
        stability = min(1.0, max(0.0, 1.0 - stddev / value))
    else:
        stability = 0.0
    return replace(prev, value=value, window=window, stddev=stddev,
                   stability=stability, count=prev.count + 1)


@dataclass
class DeviceProfile:
    """Scalar resource summary of one device plus the shared dimension weights."""

    device_id: str
    metric_values: dict
    dimension_weights: dict

    def validate(self) -> None:
        if set(self.metric_values) != set(self.dimension_weights):
            raise ValueError(
                f"device {self.device_id}: metric names do not match weight names")
        total = sum(self.dimension_weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"device {self.device_id}: weights sum to {total}, expected 1")
        for name, w in self.dimension_weights.items():
            if w < 0:
                raise ValueError(f"negative weight for {name}")
        for name, v in self.metric_values.items():
            if v < 0:
                raise ValueError(
                    f"device {self.device_id}: negative metric {name}")


@dataclass
class HeterogeneityReport:
    device_ids: list
    matrix: np.ndarray
    scores: dict


def pair_difference(a: DeviceProfile, b: DeviceProfile) -> float:
    """Weighted normalized distance between two devices.

    Each dimension contributes w_r * |r_a - r_b| / max(r_a, r_b); when
    both report zero the dimension is identical and contributes 0.
    """
    total = 0.0
    for name, w in a.dimension_weights.items():
        ra = a.metric_values[name]
        rb = b.metric_values[name]
        top = max(ra, rb)
        if top > 0:
            total += w * abs(ra - rb) / top
    return total


def heterogeneity(devices: list) -> HeterogeneityReport:
    """Pairwise difference matrix and the per-device mean score."""
    if len(devices) < 2:
        raise ValueError("heterogeneity needs at least 2 devices")
    names = set(devices[0].metric_values)
    weights = devices[0].dimension_weights
    for d in devices:
        d.validate()
        if set(d.metric_values) != names:
            raise ValueError(f"device {d.device_id}: metric set mismatch")
        if set(d.dimension_weights) != set(weights) or any(
                abs(d.dimension_weights[k] - weights[k]) > 1e-12 for k in weights):
            raise ValueError(f"device {d.device_id}: dimension weights differ")
    n = len(devices)
    matrix = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = pair_difference(devices[i], devices[j])
            matrix[i, j] = d
            matrix[j, i] = d
    scores = {}
    for i, dev in enumerate(devices):
        others = [matrix[i, j] for j in range(n) if j != i]
        scores[dev.device_id] = float(sum(others) / (n - 1))
    return HeterogeneityReport(
        device_ids=[d.device_id for d in devices], matrix=matrix, scores=scores)


# ---------------------------------------------------------------------------
# Trace synthesis


@dataclass
class ResourceTraceSpec:
    """Recipe for a deterministic time-varying resource trace.

    fluctuations maps a metric name to a model dict:
      {"model": "constant"}
      {"model": "sinusoid", "amplitude": A, "period": P, "phase": 0.0}
      {"model": "random-walk", "step_stddev": S, "min": lo, "max": hi}
      {"model": "step-change", "time": T, "value": V}
    Metrics without an entry stay at their base value.
    """

    base: ResourceSample
    fluctuations: dict
    seed: int
    length: int


_MODELS = ("constant", "sinusoid", "random-walk", "step-change")


def _metric_series(base_value: float, model: dict, length: int,
                   rng: np.random.Generator) -> np.ndarray:
    kind = model.get("model", "constant")
    if kind not in _MODELS:
        raise ConfigError(f"unknown fluctuation model {kind!r}")
    t = np.arange(length, dtype=float)
    if kind == "constant":
        return np.full(length, base_value)
    if kind == "sinusoid":
        amp = float(model.get("amplitude", 0.0))
        period = float(model.get("period", 1.0))
        if period <= 0:
            raise ConfigError("sinusoid period must be positive")
        phase = float(model.get("phase", 0.0))
        return base_value + amp * np.sin(2.0 * math.pi * t / period + phase)
    if kind == "random-walk":
        step = float(model.get("step_stddev", 0.0))
        lo = float(model.get("min", 0.0))
        hi = float(model.get("max", np.inf))
        if hi < lo:
            raise ConfigError(f"random-walk bounds inverted: [{lo}, {hi}]")
        steps = rng.normal(0.0, step, size=length)
        steps[0] = 0.0
        series = base_value + np.cumsum(steps)
        return np.clip(series, lo, hi)
    # step-change
    when = int(model.get("time", 0))
    value = float(model.get("value", base_value))
    series = np.full(length, base_value)
    series[t >= when] = value
    return series


def generate_trace(spec: ResourceTraceSpec) -> list:
    """Materialize the trace. Same spec + seed gives the same samples."""
    if spec.length <= 0:
        raise ValueError("trace length must be positive")
    spec.base.validate()
    for name in spec.fluctuations:
        if name == "time" or (name not in METRIC_FIELDS):
            raise ConfigError(f"fluctuation on unknown metric {name!r}")
    rng = np.random.default_rng(spec.seed)
    series = {}
    # Draw metric streams in fixed field order so seeds are stable under
    # config reordering.
    for name in METRIC_FIELDS[1:]:
        model = spec.fluctuations.get(name, {"model": "constant"})
        series[name] = _metric_series(getattr(spec.base, name), model,
                                      spec.length, rng)
    samples = []
    for t in range(spec.length):
        values = {name: float(series[name][t]) for name in METRIC_FIELDS[1:]}
        for name in values:
            values[name] = max(0.0, values[name])
        for name in UTIL_FIELDS:
            values[name] = min(1.0, values[name])
        values["gpu_mem_used"] = min(values["gpu_mem_used"],
                                     values["gpu_mem_total"])
        values["cpu_mem_used"] = min(values["cpu_mem_used"],
                                     values["cpu_mem_total"])
        sample = ResourceSample(time=t, **values)
        sample.validate()
        samples.append(sample)
    return samples


def trace_to_csv(samples: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for s in samples:
            writer.writerow(s.as_row())
