"""Multi-tier expert storage and the policies that drive it.

Three tiers: workspace (demand-fetched, currently active experts), cache
(prefetched and recently used experts), host (everything else). Tier
membership is tracked per expert id (layer, slot) and must stay a
disjoint, exhaustive partition with per-tier byte budgets; the simulator
re-checks that after every event.

Policies implemented here: a two-layer MLP that predicts the next MoE
layer's expert from the current selection plus token embedding/context,
a frequency baseline, the dynamic prefetch threshold, hybrid eviction
scoring, offload priority ranking, popularity-based initial placement,
and misprediction correction by similar-expert substitution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleError

SCORE_FLOOR = 1e-6

WORKSPACE = "workspace"
CACHE = "cache"
HOST = "host"
TIERS = (WORKSPACE, CACHE, HOST)


@dataclass
class CacheState:
    """Residency of every expert of the active variant across tiers.

    Tier dicts map expert id (layer, slot) -> size in bytes; insertion
    order doubles as FIFO order for workspace demotion. recent_access
    holds exponentially decayed access counters (value, last_tick) and
    importance a static per-expert weight in (0, 1].
    """

    workspace_capacity: float
    cache_capacity: float
    workspace: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)
    host: dict = field(default_factory=dict)
    pinned: set = field(default_factory=set)
    recent_access: dict = field(default_factory=dict)
    importance: dict = field(default_factory=dict)
    half_life: float = 256.0

    def tier_of(self, expert_id) -> str:
        if expert_id in self.workspace:
            return WORKSPACE
        if expert_id in self.cache:
            return CACHE
        if expert_id in self.host:
            return HOST
        raise KeyError(f"unknown expert {expert_id}")

    def size_of(self, expert_id) -> float:
        for tier in (self.workspace, self.cache, self.host):
            if expert_id in tier:
                return tier[expert_id]
        raise KeyError(f"unknown expert {expert_id}")

    def bytes_used(self, tier: str) -> float:
        return sum(self._tier(tier).values())

    def free_bytes(self, tier: str) -> float:
        cap = self.workspace_capacity if tier == WORKSPACE else self.cache_capacity
        return cap - self.bytes_used(tier)

    def resident(self, expert_id) -> bool:
        return expert_id in self.workspace or expert_id in self.cache

    def resident_bytes(self) -> float:
        return self.bytes_used(WORKSPACE) + self.bytes_used(CACHE)

    def gpu_resident_ids(self) -> list:
        return sorted(self.workspace) + sorted(self.cache)

    def _tier(self, name: str) -> dict:
        if name == WORKSPACE:
            return self.workspace
        if name == CACHE:
            return self.cache
        if name == HOST:
            return self.host
        raise KeyError(f"unknown tier {name!r}")

    def move(self, expert_id, tier_from: str, tier_to: str) -> None:
        src = self._tier(tier_from)
        if expert_id not in src:
            raise KeyError(f"{expert_id} not in {tier_from}")
        size = src.pop(expert_id)
        self._tier(tier_to)[expert_id] = size

    def record_access(self, expert_id, tick: int) -> None:
        value, last = self.recent_access.get(expert_id, (0.0, tick))
        if tick > last:
            value *= 0.5 ** ((tick - last) / self.half_life)
        self.recent_access[expert_id] = (value + 1.0, tick)

    def recent_value(self, expert_id, tick: int) -> float:
        value, last = self.recent_access.get(expert_id, (0.0, tick))
        if tick > last:
            value *= 0.5 ** ((tick - last) / self.half_life)
        return value

    def check_invariants(self) -> None:
        ws, ca, ho = set(self.workspace), set(self.cache), set(self.host)
        if ws & ca or ws & ho or ca & ho:
            raise AssertionError("cache tiers are not disjoint")
        used_ws = self.bytes_used(WORKSPACE)
        used_ca = self.bytes_used(CACHE)
        if used_ws > self.workspace_capacity + 1e-6:
            raise AssertionError(
                f"workspace over capacity: {used_ws} > {self.workspace_capacity}")
        if used_ca > self.cache_capacity + 1e-6:
            raise AssertionError(
                f"cache over capacity: {used_ca} > {self.cache_capacity}")
        if not self.pinned <= (ws | ca):
            raise AssertionError("pinned expert left the GPU tiers")


# ---------------------------------------------------------------------------
# Next-layer activation predictor


@dataclass
class PredictorMLP:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    experts_per_layer: int
    embed_dim: int
    context_dim: int

    @property
    def input_dim(self) -> int:
        return self.experts_per_layer + self.embed_dim + self.context_dim

    def forward_batch(self, X: np.ndarray) -> tuple:
        z1 = X @ self.w1.T + self.b1
        h = np.maximum(z1, 0.0)
        logits = h @ self.w2.T + self.b2
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        return probs, h, z1


def predict_next_layer(mlp: PredictorMLP, current_slots, h_t: np.ndarray,
                       c_t: np.ndarray) -> np.ndarray:
    """Probability vector over next-layer experts; always a softmax."""
    E = mlp.experts_per_layer
    if len(h_t) != mlp.embed_dim or len(c_t) != mlp.context_dim:
        raise ValueError("embedding/context dims do not match the predictor")
    for s in current_slots:
        if not (0 <= s < E):
            raise ValueError(f"slot {s} out of range")
    x = np.zeros(mlp.input_dim)
    for s in current_slots:
        x[s] = 1.0
    x[E:E + mlp.embed_dim] = h_t
    x[E + mlp.embed_dim:] = c_t
    probs, _, _ = mlp.forward_batch(x[None, :])
    return probs[0]


def build_training_samples(trace) -> tuple:
    """(X, y) pairs from consecutive MoE layers of every token."""
    E = trace.experts_per_layer
    layers = trace.moe_layer_indices
    xs, ys = [], []
    for tok in trace.tokens:
        emb, ctx = tok.embedding, tok.context
        for a, b in zip(layers[:-1], layers[1:]):
            x = np.zeros(E + len(emb) + len(ctx))
            for s in tok.layer_experts[a]:
                x[s] = 1.0
            x[E:E + len(emb)] = emb
            x[E + len(emb):] = ctx
            for target in tok.layer_experts[b]:
                xs.append(x)
                ys.append(target)
    if not xs:
        raise ValueError("trace contains no consecutive-layer pairs")
    return np.stack(xs), np.array(ys, dtype=int)


def train_predictor(trace, hidden_dim: int = 32, lr: float = 0.05,
                    epochs: int = 6, seed: int = 0, val_fraction: float = 0.2,
                    batch_size: int = 64) -> tuple:
    """Train on cross-entropy of the next layer's expert.

    Returns (PredictorMLP, metrics dict). Deterministic per seed.
    """
    if hasattr(trace, "tokens") and len(trace.tokens) == 0:
        raise ValueError("empty routing trace")
    X, y = build_training_samples(trace)
    E = trace.experts_per_layer
    tok0 = trace.tokens[0]
    embed_dim = len(tok0.embedding)
    context_dim = len(tok0.context)

    n = X.shape[0]
    n_val = int(n * val_fraction)
    n_train = n - n_val
    if n_train < 1:
        raise ValueError("not enough samples to train")
    X_train, y_train = X[:n_train], y[:n_train]
    X_val, y_val = X[n_train:], y[n_train:]

    rng = np.random.default_rng(seed)
    in_dim = X.shape[1]
    mlp = PredictorMLP(
        w1=rng.normal(scale=0.1, size=(hidden_dim, in_dim)),
        b1=np.zeros(hidden_dim),
        w2=rng.normal(scale=0.1, size=(E, hidden_dim)),
        b2=np.zeros(E),
        experts_per_layer=E, embed_dim=embed_dim, context_dim=context_dim)

    for _ in range(epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            idx = order[start:start + batch_size]
            _sgd_step(mlp, X_train[idx], y_train[idx], lr)

    metrics = {
        "samples": int(n),
        "train_top1": _accuracy(mlp, X_train, y_train, 1),
        "val_top1": _accuracy(mlp, X_val, y_val, 1) if n_val else float("nan"),
        "val_top3": _accuracy(mlp, X_val, y_val, 3) if n_val else float("nan"),
    }
    return mlp, metrics


def _sgd_step(mlp: PredictorMLP, X: np.ndarray, y: np.ndarray,
              lr: float) -> None:
    B = X.shape[0]
    probs, h, z1 = mlp.forward_batch(X)
    dlogits = probs.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    dw2 = dlogits.T @ h
    db2 = dlogits.sum(axis=0)
    dh = dlogits @ mlp.w2
    dz1 = dh * (z1 > 0)
    dw1 = dz1.T @ X
    db1 = dz1.sum(axis=0)
    mlp.w2 -= lr * dw2
    mlp.b2 -= lr * db2
    mlp.w1 -= lr * dw1
    mlp.b1 -= lr * db1


def cross_entropy(mlp: PredictorMLP, X: np.ndarray, y: np.ndarray) -> float:
    probs, _, _ = mlp.forward_batch(X)
    return float(-np.mean(np.log(probs[np.arange(X.shape[0]), y] + 1e-300)))


def _accuracy(mlp: PredictorMLP, X: np.ndarray, y: np.ndarray,
              k: int) -> float:
    if X.shape[0] == 0:
        return float("nan")
    probs, _, _ = mlp.forward_batch(X)
    # stable top-k: higher prob first, lower slot on ties
    order = np.lexsort((np.arange(probs.shape[1])[None, :].repeat(
        probs.shape[0], axis=0), -probs), axis=1)
    topk = order[:, :k]
    hits = (topk == y[:, None]).any(axis=1)
    return float(hits.mean())


def frequency_baseline(stats, next_layer: int) -> np.ndarray:
    """Predict the next layer's activation frequencies as-is."""
    if next_layer not in stats.counts:
        raise ValueError(f"no stats for layer {next_layer}")
    return stats.freqs(next_layer)


def mlp_to_json(mlp: PredictorMLP) -> str:
    doc = {
        "experts_per_layer": mlp.experts_per_layer,
        "embed_dim": mlp.embed_dim,
        "context_dim": mlp.context_dim,
        "w1": {"shape": list(mlp.w1.shape), "values": mlp.w1.ravel().tolist()},
        "b1": {"shape": list(mlp.b1.shape), "values": mlp.b1.tolist()},
        "w2": {"shape": list(mlp.w2.shape), "values": mlp.w2.ravel().tolist()},
        "b2": {"shape": list(mlp.b2.shape), "values": mlp.b2.tolist()},
    }
    return json.dumps(doc, sort_keys=True)


def mlp_from_json(text: str) -> PredictorMLP:
    doc = json.loads(text)

    def arr(key):
        entry = doc[key]
        return np.array(entry["values"], dtype=float).reshape(entry["shape"])

    return PredictorMLP(w1=arr("w1"), b1=arr("b1"), w2=arr("w2"), b2=arr("b2"),
                        experts_per_layer=int(doc["experts_per_layer"]),
                        embed_dim=int(doc["embed_dim"]),
                        context_dim=int(doc["context_dim"]))


# ---------------------------------------------------------------------------
# Offload policy knobs


@dataclass
class OffloadPolicy:
    gamma_prio: float = 0.5
    theta_base: float = 0.5
    delta_pref: float = 0.5
    gamma_cachethr: float = 0.6
    delta_evict: float = 0.5
    lambda_evict: float = 0.5
    threshold_mode: str = "resource-aware"
    conservative_stability: bool = False
    substitution_sim_min: float = 0.8
    priority_quantile: float = 0.9

    def validate(self) -> None:
        for name in ("gamma_prio", "delta_pref", "gamma_cachethr",
                     "delta_evict", "lambda_evict", "substitution_sim_min",
                     "priority_quantile"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.theta_base < 0:
            raise ConfigError("theta_base must be nonnegative")
        if self.threshold_mode not in ("resource-aware", "storage-fraction",
                                       "constant"):
            raise ConfigError(f"unknown threshold_mode {self.threshold_mode!r}")


def prefetch_threshold(policy: OffloadPolicy, s_b: float, mem_avail_gpu: float,
                       mem_total_gpu: float) -> float:
    """Dynamic prefetch threshold, clamped into [0, 1].

    resource-aware: theta_base * S_b * (1 + delta * m_avail/m_total). Note
    that low bandwidth stability LOWERS the threshold, i.e. prefetches
    more aggressively; conservative_stability flips that by dividing by
    S_b instead (capped by the clamp). "constant" ignores the resource
    state entirely and returns theta_base; it exists as the static
    baseline the adaptive modes are compared against.
    """
    if mem_total_gpu <= 0:
        raise ValueError("mem_total_gpu must be positive")
    frac = mem_avail_gpu / mem_total_gpu
    if policy.threshold_mode == "constant":
        theta = policy.theta_base
    elif policy.threshold_mode == "storage-fraction":
        theta = policy.gamma_cachethr * frac
    elif policy.conservative_stability:
        theta = policy.theta_base * (1.0 + policy.delta_pref * frac) / \
            max(s_b, 1e-3)
    else:
        theta = policy.theta_base * s_b * (1.0 + policy.delta_pref * frac)
    return min(1.0, max(0.0, theta))


def decide_prefetch(probs: np.ndarray, theta_pre: float, cache: CacheState,
                    layer: int, sizes, exclude=(),
                    budget_bytes: float = None) -> list:
    """Orders non-resident experts with p > theta_pre by descending
    probability and truncates to the byte budget (free cache bytes plus
    what eviction could reclaim, unless the caller passes its own)."""
    if budget_bytes is None:
        evictable = sum(sz for eid, sz in cache.cache.items()
                        if eid not in cache.pinned)
        budget_bytes = cache.free_bytes(CACHE) + evictable
    order = sorted(range(len(probs)), key=lambda s: (-probs[s], s))
    chosen = []
    spent = 0.0
    for slot in order:
        if probs[slot] <= theta_pre:
            break
        eid = (layer, slot)
        if cache.resident(eid) or eid in exclude:
            continue
        size = sizes(eid) if callable(sizes) else sizes[eid]
        if spent + size > budget_bytes:
            continue
        spent += size
        chosen.append(eid)
    return chosen


def eviction_score(p_next: float, f_recent: float, importance: float,
                   delta_evict: float, lambda_evict: float) -> float:
    """Hybrid eviction score; higher means evict sooner."""
    f = max(f_recent, SCORE_FLOOR)
    imp = max(importance, SCORE_FLOOR)
    return (1.0 - delta_evict) * (1.0 - p_next) + \
        delta_evict * (lambda_evict / f + (1.0 - lambda_evict) / imp)


def evict(cache: CacheState, bytes_needed: float, scores: dict) -> list:
    """Pick cache-tier victims, highest score first, until the tier would
    have bytes_needed free. Returns the victim list without mutating."""
    if bytes_needed > cache.cache_capacity:
        raise InfeasibleError(
            f"cannot free {bytes_needed} bytes from a "
            f"{cache.cache_capacity}-byte cache")
    free = cache.free_bytes(CACHE)
    if free >= bytes_needed:
        return []
    victims = []
    candidates = sorted(
        (eid for eid in cache.cache if eid not in cache.pinned),
        key=lambda eid: (-scores.get(eid, 0.0), eid))
    for eid in candidates:
        victims.append(eid)
        free += cache.cache[eid]
        if free >= bytes_needed:
            return victims
    raise InfeasibleError(
        f"eviction cannot free {bytes_needed} bytes; "
        f"{free} reachable after evicting all unpinned residents")


def offload_priority(f_act: float, size: float, comm_latency_est: float,
                     gamma_prio: float, normalizer: float) -> float:
    """gamma * f_act + (1 - gamma) * (size/latency) / population max."""
    if comm_latency_est <= 0:
        raise ValueError("comm_latency_est must be positive")
    if normalizer <= 0:
        raise ValueError("normalizer must be positive")
    ratio = (size / comm_latency_est) / normalizer
    return gamma_prio * f_act + (1.0 - gamma_prio) * ratio


# ---------------------------------------------------------------------------
# Initial placement


@dataclass
class PlacementPlan:
    order: list        # expert ids by descending popularity
    assignment: dict   # expert id -> tier name
    eta_gs: int        # number of GPU-resident experts


def plan_initial_placement(sizes: dict, freqs: dict, workspace_capacity: float,
                           cache_capacity: float, pinned=frozenset(),
                           working_set_bytes: float = 0.0) -> PlacementPlan:
    """Popularity-ordered fill: workspace first, then cache, rest host.

    Pinned experts are placed into the cache tier up front and count
    toward eta_gs. The per-layer working set (the K experts a layer
    computes with) must fit the workspace or the deployment is infeasible.
    """
    if workspace_capacity <= 0 or cache_capacity < 0:
        raise ValueError("capacities must be positive")
    if working_set_bytes > workspace_capacity:
        raise InfeasibleError(
            f"working set {working_set_bytes} B exceeds workspace "
            f"{workspace_capacity} B")
    assignment = {}
    cache_used = 0.0
    pinned_order = sorted(pinned, key=lambda e: (-freqs.get(e, 0.0), e))
    for eid in pinned_order:
        cache_used += sizes[eid]
        if cache_used > cache_capacity:
            raise InfeasibleError("pinned experts exceed cache capacity")
        assignment[eid] = CACHE

    order = sorted(sizes, key=lambda e: (-freqs.get(e, 0.0), e))
    ws_used = 0.0
    phase = WORKSPACE
    for eid in order:
        if eid in assignment:
            continue
        size = sizes[eid]
        if phase == WORKSPACE:
            if ws_used + size <= workspace_capacity:
                ws_used += size
                assignment[eid] = WORKSPACE
                continue
            phase = CACHE
        if phase == CACHE:
            if cache_used + size <= cache_capacity:
                cache_used += size
                assignment[eid] = CACHE
                continue
            phase = HOST
        assignment[eid] = HOST
    eta_gs = sum(1 for t in assignment.values() if t != HOST)
    return PlacementPlan(order=order, assignment=assignment, eta_gs=eta_gs)


def build_cache_state(plan: PlacementPlan, sizes: dict,
                      workspace_capacity: float, cache_capacity: float,
                      pinned=frozenset(), importance: dict = None,
                      half_life: float = 256.0) -> CacheState:
    state = CacheState(workspace_capacity=workspace_capacity,
                       cache_capacity=cache_capacity,
                       pinned=set(pinned), half_life=half_life)
    for eid in plan.order:
        state._tier(plan.assignment[eid])[eid] = sizes[eid]
    state.importance = dict(importance or {})
    state.check_invariants()
    return state


# ---------------------------------------------------------------------------
# Misprediction correction


@dataclass
class CorrectionDecision:
    action: str      # "substitute" | "fetch"
    expert: tuple
    penalty: float = 0.0


def correct_misprediction(needed_id, cache: CacheState, similarity,
                          policy: OffloadPolicy, priority: float = 0.0,
                          priority_threshold: float = 1.0) -> CorrectionDecision:
    """Serve a non-resident demand: substitute the most similar resident
    same-layer expert when one clears the similarity floor, else fetch.
    High-priority experts always fetch."""
    if cache.resident(needed_id):
        raise ValueError(f"{needed_id} is already resident")
    if priority >= priority_threshold:
        return CorrectionDecision(action="fetch", expert=needed_id)
    layer = needed_id[0]
    best_id, best_sim = None, -np.inf
    for eid in cache.gpu_resident_ids():
        if eid[0] != layer or eid == needed_id:
            continue
        sim = similarity(needed_id, eid)
        if sim > best_sim:
            best_id, best_sim = eid, sim
    if best_id is not None and best_sim >= policy.substitution_sim_min:
        return CorrectionDecision(action="substitute", expert=best_id,
                                  penalty=1.0 - best_sim)
    return CorrectionDecision(action="fetch", expert=needed_id)
