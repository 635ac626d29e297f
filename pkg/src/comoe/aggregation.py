"""Expert fusion and the pre-computed variant library.

Fusion pipeline per layer: decide how many experts to retain (fixed ratio
or entropy-adaptive), pick the most-activated experts as principals,
assign every secondary to its most similar principal, then merge each
group by frequency-weighted parameter averaging. A variant library holds
the original plus one fused variant per configuration, each with a memory
requirement and a monotone performance surrogate, so runtime selection is
a pure argmax under the memory budget.

The performance estimate is NOT an accuracy number. It is the mean over
MoE layers of retained activation mass plus similarity-weighted merged
mass, normalized so the unfused model scores 1. It exists to give the
selection rule a monotone objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InfeasibleError
from .moe import ActivationStats, Expert, MoeModel

EPS_FREQ = 1e-12


@dataclass
class FusionConfig:
    mode: str                    # "fixed" | "adaptive"
    r: float = None
    r_base: float = None
    delta_r: float = None
    e_min: int = 1
    theta_act: float = 0.0
    scope: str = "encoder"       # "encoder" | "both"

    def validate(self) -> None:
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.mode == "fixed":
            if self.r is None or not (0.0 < self.r <= 1.0):
                raise ConfigError(f"fixed fusion needs r in (0, 1], got {self.r}")
        else:
            if self.r_base is None or not (0.0 < self.r_base <= 1.0):
                raise ConfigError("adaptive fusion needs r_base in (0, 1]")
            if self.delta_r is None or self.delta_r < 0:
                raise ConfigError("adaptive fusion needs delta_r >= 0")
            if self.e_min < 1:
                raise ConfigError("e_min must be >= 1")
        if not (0.0 <= self.theta_act < 1.0):
            raise ConfigError("theta_act must be in [0, 1)")
        if self.scope not in ("encoder", "both"):
            raise ConfigError(f"unknown fusion scope {self.scope!r}")

    @property
    def config_id(self) -> str:
        if self.mode == "fixed":
            return f"fixed-{self.r:g}"
        return f"adaptive-{self.r_base:g}-{self.delta_r:g}"


@dataclass
class ExpertGroup:
    principal_slot: int
    member_slots: tuple = ()
    member_freqs: tuple = None


@dataclass
class SwitchPolicy:
    lambda_switch: float = 0.5
    switch_cost: float = 0.05
    t_threshold: float = 8.0

    def validate(self) -> None:
        if self.lambda_switch < 0 or self.switch_cost < 0 or self.t_threshold < 0:
            raise ConfigError("switch policy values must be nonnegative")


@dataclass
class ModelVariant:
    variant_id: str
    retained: dict               # layer -> {principal_slot: Expert (merged)}
    slot_map: dict               # layer -> {original_slot: principal_slot}
    groups: dict                 # layer -> [ExpertGroup]
    mem_required: float
    perf_estimate: float
    fusion_config: FusionConfig = None
    expert_bytes: float = 0.0

    def retained_count(self, layer: int) -> int:
        return len(self.retained[layer])

    @property
    def total_retained(self) -> int:
        return sum(len(v) for v in self.retained.values())

    def resolve(self, layer: int, original_slot: int) -> int:
        """Merged slot serving a routing decision made on the original model."""
        return self.slot_map[layer][original_slot]


@dataclass
class VariantLibrary:
    variants: list

    def __post_init__(self):
        ids = [v.variant_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate variant ids: {ids}")
        self.variants = sorted(self.variants,
                               key=lambda v: (v.mem_required, v.variant_id))

    def by_id(self, variant_id: str) -> ModelVariant:
        for v in self.variants:
            if v.variant_id == variant_id:
                return v
        raise KeyError(f"no variant {variant_id!r}")


# ---------------------------------------------------------------------------
# Retention counts


def fixed_retention(E: int, r: float) -> int:
    if not (0.0 < r <= 1.0):
        raise ValueError(f"retention ratio must be in (0, 1], got {r}")
    return max(1, int(math.floor(r * E)))


def layer_entropy(stats: ActivationStats, layer: int) -> tuple:
    """(H_l, normalized H_l); 0 log 0 counts as 0."""
    f = stats.freqs(layer)
    mask = f > 0
    h = float(-np.sum(f[mask] * np.log(f[mask])))
    E = stats.experts_per_layer
    hbar = h / math.log(E) if E > 1 else 0.0
    return h, hbar


def adaptive_retention(E: int, r_base: float, delta_r: float, hbar: float,
                       e_min: int) -> int:
    if not (0.0 < r_base <= 1.0) or delta_r < 0 or e_min < 1:
        raise ValueError("adaptive retention parameters out of range")
    count = int(math.floor(E * (r_base + delta_r * hbar)))
    return min(E, max(e_min, count))


# ---------------------------------------------------------------------------
# Principal selection, grouping, merging


def identify_principals(stats: ActivationStats, layer: int, target_count: int,
                        theta_act: float = 0.0) -> list:
    """Top target_count slots by activation frequency (ties to lower slot),
    plus every slot at or above theta_act. theta_act=0 disables the
    force-include rule; taken literally it would pin all experts."""
    E = stats.experts_per_layer
    if not (1 <= target_count <= E):
        raise ValueError(f"target_count {target_count} outside [1, {E}]")
    f = stats.freqs(layer)
    order = sorted(range(E), key=lambda s: (-f[s], s))
    principals = set(order[:target_count])
    if theta_act > 0.0:
        principals.update(s for s in range(E) if f[s] >= theta_act)
    return sorted(principals)


def group_experts(layer_experts: list, principal_slots: list,
                  similarity) -> list:
    """Assign each secondary to its argmax-similarity principal.

    similarity is either a callable (Expert, Expert) -> float or a full
    E x E matrix. Exact ties go to the lowest principal slot.
    """
    if not principal_slots:
        raise ValueError("need at least one principal")
    by_slot = {e.slot: e for e in layer_experts}
    principal_slots = sorted(principal_slots)
    members = {p: [] for p in principal_slots}
    for e in layer_experts:
        if e.slot in members:
            continue
        best_p, best_sim = None, -np.inf
        for p in principal_slots:
            if callable(similarity):
                sim = similarity(e, by_slot[p])
            else:
                sim = similarity[e.slot][p]
            if sim > best_sim:
                best_p, best_sim = p, sim
        members[best_p].append(e.slot)
    return [ExpertGroup(principal_slot=p, member_slots=tuple(members[p]))
            for p in principal_slots]


def merge_group(group: ExpertGroup, layer_experts: dict,
                stats: ActivationStats, layer: int) -> Expert:
    """Frequency-weighted parameter mean over principal plus members."""
    slots = (group.principal_slot,) + tuple(group.member_slots)
    freqs = stats.freqs(layer)
    weights = np.array([freqs[s] for s in slots])
    vectors = np.stack([layer_experts[s].params for s in slots])
    total = weights.sum()
    if total <= EPS_FREQ:
        # Nothing in this group was ever activated; fall back to a plain mean.
        merged = vectors.mean(axis=0)
    else:
        merged = (weights[:, None] * vectors).sum(axis=0) / total
    principal = layer_experts[group.principal_slot]
    return Expert(layer=layer, slot=group.principal_slot, params=merged,
                  size=principal.size)


# ---------------------------------------------------------------------------
# Whole-model fusion


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def _layer_score(groups: list, freqs: np.ndarray, sim_matrix) -> float:
    """Retained activation mass + similarity-weighted merged mass."""
    score = 0.0
    for g in groups:
        score += float(freqs[g.principal_slot])
        for s in g.member_slots:
            sim = sim_matrix[s][g.principal_slot] if sim_matrix is not None else 1.0
            score += float(freqs[s]) * _clamp01(sim)
    return score


def _identity_layer(model: MoeModel, layer: int) -> tuple:
    experts = model.layer_experts(layer)
    retained = {e.slot: e for e in experts}
    slot_map = {e.slot: e.slot for e in experts}
    groups = [ExpertGroup(principal_slot=e.slot) for e in experts]
    return retained, slot_map, groups


def original_variant(model: MoeModel, m_other: float) -> ModelVariant:
    retained, slot_map, groups = {}, {}, {}
    for layer in model.spec.moe_layer_indices:
        r, m, g = _identity_layer(model, layer)
        retained[layer] = r
        slot_map[layer] = m
        groups[layer] = g
    bytes_total = model.spec.total_expert_bytes
    return ModelVariant(variant_id="original", retained=retained,
                        slot_map=slot_map, groups=groups,
                        mem_required=bytes_total + m_other,
                        perf_estimate=1.0, fusion_config=None,
                        expert_bytes=bytes_total)


def fuse_model(model: MoeModel, stats: ActivationStats, config: FusionConfig,
               alpha_sim: float, calib, m_other: float = 0.0) -> ModelVariant:
    """Build one fused variant. Layers outside the fusion scope are copied."""
    from .moe import similarity_matrix

    config.validate()
    spec = model.spec
    E = spec.experts_per_layer
    in_scope = set(spec.encoder_moe_layers)
    if config.scope == "both":
        in_scope |= set(spec.decoder_moe_layers)

    retained, slot_map, groups_by_layer = {}, {}, {}
    scores, bytes_total = [], 0.0
    for layer in spec.moe_layer_indices:
        freqs = stats.freqs(layer)
        if layer not in in_scope:
            r, m, g = _identity_layer(model, layer)
            retained[layer], slot_map[layer], groups_by_layer[layer] = r, m, g
            scores.append(float(freqs.sum()))
            bytes_total += sum(e.size for e in r.values())
            continue
        if config.mode == "fixed":
            target = fixed_retention(E, config.r)
        else:
            _, hbar = layer_entropy(stats, layer)
            target = adaptive_retention(E, config.r_base, config.delta_r,
                                        hbar, config.e_min)
        principals = identify_principals(stats, layer, target, config.theta_act)
        layer_experts = model.layer_experts(layer)
        sim = similarity_matrix(layer_experts, alpha_sim, calib)
        groups = group_experts(layer_experts, principals, sim)
        by_slot = {e.slot: e for e in layer_experts}
        merged = {}
        mapping = {}
        filled_groups = []
        for g in groups:
            merged[g.principal_slot] = merge_group(g, by_slot, stats, layer)
            mapping[g.principal_slot] = g.principal_slot
            for s in g.member_slots:
                mapping[s] = g.principal_slot
            filled_groups.append(ExpertGroup(
                principal_slot=g.principal_slot,
                member_slots=g.member_slots,
                member_freqs=tuple(float(freqs[s]) for s in g.member_slots)))
        retained[layer] = merged
        slot_map[layer] = mapping
        groups_by_layer[layer] = filled_groups
        scores.append(_layer_score(filled_groups, freqs, sim))
        bytes_total += sum(e.size for e in merged.values())

    perf = float(np.mean(scores))
    return ModelVariant(variant_id=config.config_id, retained=retained,
                        slot_map=slot_map, groups=groups_by_layer,
                        mem_required=bytes_total + m_other,
                        perf_estimate=perf, fusion_config=config,
                        expert_bytes=bytes_total)


def build_library(model: MoeModel, stats: ActivationStats, configs: list,
                  alpha_sim: float, calib, m_other: float = 0.0) -> VariantLibrary:
    variants = [original_variant(model, m_other)]
    for cfg in configs:
        variants.append(fuse_model(model, stats, cfg, alpha_sim, calib, m_other))
    return VariantLibrary(variants=variants)


def variant_freqs(variant: ModelVariant, stats: ActivationStats) -> dict:
    """Aggregated activation frequency per retained (layer, slot)."""
    out = {}
    for layer, groups in variant.groups.items():
        freqs = stats.freqs(layer)
        for g in groups:
            total = float(freqs[g.principal_slot])
            total += sum(float(freqs[s]) for s in g.member_slots)
            out[(layer, g.principal_slot)] = total
    return out


# ---------------------------------------------------------------------------
# Runtime decisions


def select_variant(library: VariantLibrary, mem_available: float,
                   required_bytes=None) -> ModelVariant:
    """Best-performing variant that fits. required_bytes overrides the
    library's M_req, which lets an offloading runtime substitute its
    resident-bytes requirement for the full footprint."""
    if not library.variants:
        raise ValueError("empty variant library")
    req = required_bytes if required_bytes is not None else \
        (lambda v: v.mem_required)
    feasible = [v for v in library.variants if req(v) <= mem_available]
    if not feasible:
        tightest = min(req(v) for v in library.variants)
        raise InfeasibleError(
            f"no variant fits: min requirement {tightest:.3e} B "
            f"> available {mem_available:.3e} B")
    feasible.sort(key=lambda v: (-v.perf_estimate, v.mem_required, v.variant_id))
    return feasible[0]


def should_switch(current: ModelVariant, candidate: ModelVariant,
                  delta_p: float, policy: SwitchPolicy, t_stable: float) -> bool:
    """Switch only when the gain clears the cost and resources have been
    stable long enough; both conditions are evaluated literally."""
    if t_stable < 0:
        raise ValueError("t_stable must be nonnegative")
    if candidate.variant_id == current.variant_id:
        return False
    return (delta_p > policy.lambda_switch * policy.switch_cost) and \
        (t_stable > policy.t_threshold)


def granularity_decision(a_m: float, mem_avail_gpu: float, s_e: float,
                         beta_risk: float, s_m: float, E: int) -> int:
    """Target retained-expert count under current memory and its stability."""
    if not (0.0 < a_m < 1.0):
        raise ValueError(f"a_m must be in (0, 1), got {a_m}")
    if s_e <= 0:
        raise ValueError("expert size must be positive")
    if not (0.0 <= s_m <= 1.0):
        raise ValueError(f"s_m must be in [0, 1], got {s_m}")
    denom = s_e * (1.0 + beta_risk * (1.0 - s_m))
    raw = int(math.floor(a_m * mem_avail_gpu / denom))
    return min(max(1, raw), E)


def library_manifest(library: VariantLibrary) -> dict:
    """JSON-ready description of every variant."""
    entries = []
    for v in library.variants:
        entries.append({
            "id": v.variant_id,
            "mem_required": v.mem_required,
            "expert_bytes": v.expert_bytes,
            "perf_estimate": v.perf_estimate,
            "retained": {str(layer): sorted(slots)
                         for layer, slots in v.retained.items()},
            "groups": {str(layer): [{"principal": g.principal_slot,
                                     "members": list(g.member_slots)}
                                    for g in groups]
                       for layer, groups in v.groups.items()},
        })
    return {"variants": entries}
