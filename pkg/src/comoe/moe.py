"""Synthetic MoE model: geometry, experts, routing traces, similarity.

No real transformer weights exist at desk scale, so an expert is a
low-dimensional parameter vector (similarity structure) plus a byte size
(memory math). The two are deliberately decoupled: parameter vectors stay
small while byte sizes match multi-GB model footprints.

Routing is either replayed from a JSONL trace or generated: first MoE
layer draws from a Zipf distribution over slots, and each following MoE
layer either follows a fixed layer-to-layer expert map (probability rho)
or draws independently. That gives the activation predictor a learnable
signal whose strength is controlled by one knob.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PARAM_DIM = 64
ARCHETYPE_NOISE = 0.35


@dataclass
class MoeModelSpec:
    total_layers: int
    encoder_moe_layers: tuple
    decoder_moe_layers: tuple
    experts_per_layer: int
    expert_size_bytes: float
    top_k: int = 1
    expert_param_dim: int = DEFAULT_PARAM_DIM

    @property
    def moe_layer_indices(self) -> tuple:
        return tuple(sorted(tuple(self.encoder_moe_layers) +
                            tuple(self.decoder_moe_layers)))

    def validate(self) -> None:
        if self.top_k > self.experts_per_layer:
            raise ValueError("top_k exceeds experts_per_layer")
        if self.top_k < 1 or self.experts_per_layer < 1:
            raise ValueError("counts must be >= 1")
        if self.expert_size_bytes <= 0:
            raise ValueError("expert_size_bytes must be positive")
        if self.expert_param_dim < 1:
            raise ValueError("expert_param_dim must be >= 1")
        idx = self.moe_layer_indices
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate MoE layer indices")
        for l in idx:
            if not (1 <= l <= self.total_layers):
                raise ValueError(f"MoE layer {l} outside [1, {self.total_layers}]")
        if set(self.encoder_moe_layers) & set(self.decoder_moe_layers):
            raise ValueError("encoder and decoder MoE layers overlap")

    @property
    def expert_count(self) -> int:
        return len(self.moe_layer_indices) * self.experts_per_layer

    @property
    def total_expert_bytes(self) -> float:
        return self.expert_count * self.expert_size_bytes


@dataclass
class Expert:
    layer: int
    slot: int
    params: np.ndarray
    size: float


@dataclass
class MoeModel:
    spec: MoeModelSpec
    experts: dict  # (layer, slot) -> Expert

    def layer_experts(self, layer: int) -> list:
        E = self.spec.experts_per_layer
        return [self.experts[(layer, j)] for j in range(E)]


def synthesize_model(spec: MoeModelSpec, seed: int) -> MoeModel:
    """Seeded expert synthesis with archetype structure.

    Each layer gets max(2, E // 4) archetype vectors; expert j perturbs
    archetype j mod G. Experts sharing an archetype end up measurably
    more similar than strangers, which keeps grouping non-trivial.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    dim = spec.expert_param_dim
    E = spec.experts_per_layer
    groups = max(2, E // 4)
    experts = {}
    for layer in spec.moe_layer_indices:
        archetypes = rng.normal(size=(groups, dim))
        for j in range(E):
            params = archetypes[j % groups] + \
                ARCHETYPE_NOISE * rng.normal(size=dim)
            experts[(layer, j)] = Expert(layer=layer, slot=j, params=params,
                                         size=spec.expert_size_bytes)
    return MoeModel(spec=spec, experts=experts)


# ---------------------------------------------------------------------------
# Routing


@dataclass
class RoutingGeneratorSpec:
    """Zipf skew (scalar or {layer: skew}), correlation rho, seeds.

    structure_seed fixes the rank-to-slot permutations and the shared
    layer-to-layer successor map; seed drives the per-token draws.
    Keeping them apart means traces with different seeds share the same
    routing structure, so a predictor trained on one generalizes to the
    others.
    """

    skew: object = 1.0
    rho: float = 0.9
    seed: int = 0
    structure_seed: int = 0
    embed_dim: int = 16
    context_dim: int = 8

    def layer_skew(self, layer: int) -> float:
        if isinstance(self.skew, dict):
            return float(self.skew.get(layer, self.skew.get("default", 1.0)))
        return float(self.skew)

    def validate(self) -> None:
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")
        skews = self.skew.values() if isinstance(self.skew, dict) else [self.skew]
        for s in skews:
            if float(s) < 0:
                raise ValueError("skew must be nonnegative")


@dataclass
class TokenRecord:
    token_id: int
    layer_experts: dict  # layer -> tuple of slots, |tuple| = K
    embedding: np.ndarray
    context: np.ndarray


@dataclass
class RoutingTrace:
    tokens: list
    experts_per_layer: int
    moe_layer_indices: tuple
    top_k: int = 1

    def __len__(self) -> int:
        return len(self.tokens)


def _zipf_slot_probs(E: int, skew: float, perm: np.ndarray) -> np.ndarray:
    ranks = np.arange(1, E + 1, dtype=float)
    w = ranks ** (-skew)
    w /= w.sum()
    probs = np.empty(E)
    probs[perm] = w
    return probs


def _draw_slots(rng: np.random.Generator, cdf: np.ndarray, k: int) -> tuple:
    """k distinct slots by inverse-CDF sampling with rejection."""
    chosen = []
    while len(chosen) < k:
        u = rng.random()
        slot = int(np.searchsorted(cdf, u, side="right"))
        slot = min(slot, cdf.size - 1)
        if slot not in chosen:
            chosen.append(slot)
    return tuple(chosen)


def generate_routing(gspec: RoutingGeneratorSpec, model_spec: MoeModelSpec,
                     n_tokens: int) -> RoutingTrace:
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    gspec.validate()
    model_spec.validate()
    rng = np.random.default_rng(gspec.seed)
    rng_struct = np.random.default_rng(gspec.structure_seed)
    E = model_spec.experts_per_layer
    K = model_spec.top_k
    layers = model_spec.moe_layer_indices

    # Fixed structure first: rank-to-slot permutations per layer and one
    # successor map shared by every adjacent layer pair. Tokens never
    # change these, and they come from structure_seed, not the draw seed.
    # A single shared map keeps the conditional learnable from current
    # slots alone, which is all the expert predictor conditions on.
    perms = {l: rng_struct.permutation(E) for l in layers}
    successor = rng_struct.permutation(E)
    maps = {}
    for a, b in zip(layers[:-1], layers[1:]):
        maps[(a, b)] = successor
    probs = {l: _zipf_slot_probs(E, gspec.layer_skew(l), perms[l])
             for l in layers}
    cdfs = {l: np.cumsum(probs[l]) for l in layers}

    embeddings = rng.normal(size=(n_tokens, gspec.embed_dim))
    contexts = rng.normal(size=(n_tokens, gspec.context_dim))

    tokens = []
    for t in range(n_tokens):
        selected = {}
        prev = None
        for idx, l in enumerate(layers):
            if idx == 0 or rng.random() >= gspec.rho:
                slots = _draw_slots(rng, cdfs[l], K)
            else:
                m = maps[(layers[idx - 1], l)]
                slots = tuple(int(m[s]) for s in prev)
            selected[l] = slots
            prev = slots
        tokens.append(TokenRecord(token_id=t, layer_experts=selected,
                                  embedding=embeddings[t], context=contexts[t]))
    return RoutingTrace(tokens=tokens, experts_per_layer=E,
                        moe_layer_indices=layers, top_k=K)


@dataclass
class ActivationStats:
    counts: dict  # layer -> ndarray[E]
    totals: dict  # layer -> int
    experts_per_layer: int

    def freqs(self, layer: int) -> np.ndarray:
        total = self.totals[layer]
        if total <= 0:
            raise ValueError(f"no activations recorded for layer {layer}")
        return self.counts[layer] / total

    @property
    def layers(self) -> tuple:
        return tuple(sorted(self.counts))


def collect_stats(trace: RoutingTrace) -> ActivationStats:
    """Per-layer activation counts and frequencies from a trace."""
    if len(trace.tokens) == 0:
        raise ValueError("empty routing trace")
    E = trace.experts_per_layer
    counts = {l: np.zeros(E) for l in trace.moe_layer_indices}
    totals = {l: 0 for l in trace.moe_layer_indices}
    for tok in trace.tokens:
        for l, slots in tok.layer_experts.items():
            for s in slots:
                counts[l][s] += 1
            totals[l] += len(slots)
    return ActivationStats(counts=counts, totals=totals, experts_per_layer=E)


# ---------------------------------------------------------------------------
# Similarity


@dataclass
class Calibration:
    """Probe inputs plus the fixed projection defining the output surrogate."""

    probes: np.ndarray      # (n_probes, dim)
    projection: np.ndarray  # (buckets, dim)


def make_calibration(dim: int, n_probes: int = 8, seed: int = 7,
                     buckets: int = 8) -> Calibration:
    if n_probes < 1:
        raise ValueError("need at least one probe")
    rng = np.random.default_rng(seed)
    return Calibration(probes=rng.normal(size=(n_probes, dim)),
                       projection=rng.normal(size=(buckets, dim)))


def param_similarity(a: Expert, b: Expert) -> float:
    """Cosine similarity of the parameter vectors."""
    pa, pb = np.asarray(a.params), np.asarray(b.params)
    if pa.shape != pb.shape:
        raise ValueError("parameter dimension mismatch")
    na, nb = np.linalg.norm(pa), np.linalg.norm(pb)
    if na == 0 or nb == 0:
        raise ValueError("zero parameter vector has no direction")
    return float(pa @ pb / (na * nb))


def _softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def expert_output_dists(expert: Expert, calib: Calibration) -> np.ndarray:
    """Surrogate output distribution per probe: softmax of a fixed projection
    of the elementwise product params * probe. Shape (n_probes, buckets)."""
    modulated = expert.params[None, :] * calib.probes       # (n, dim)
    logits = modulated @ calib.projection.T                 # (n, buckets)
    return _softmax(logits, axis=1)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def func_similarity(a: Expert, b: Expert, calib: Calibration) -> float:
    """1 minus the mean symmetrized KL between surrogate outputs, in [0, 1]."""
    if calib.probes.shape[0] < 1:
        raise ValueError("empty calibration set")
    pa = expert_output_dists(a, calib)
    pb = expert_output_dists(b, calib)
    total = 0.0
    for i in range(pa.shape[0]):
        total += 0.5 * (kl_divergence(pa[i], pb[i]) + kl_divergence(pb[i], pa[i]))
    mean_kl = total / pa.shape[0]
    return float(min(1.0, max(0.0, 1.0 - mean_kl)))


def combined_similarity(a: Expert, b: Expert, alpha_sim: float,
                        calib: Calibration) -> float:
    if not (0.0 <= alpha_sim <= 1.0):
        raise ValueError(f"alpha_sim must be in [0, 1], got {alpha_sim}")
    return alpha_sim * param_similarity(a, b) + \
        (1.0 - alpha_sim) * func_similarity(a, b, calib)


def similarity_matrix(experts: list, alpha_sim: float,
                      calib: Calibration) -> np.ndarray:
    """Vectorized combined similarity over one layer's experts.

    Matches combined_similarity pairwise up to float reassociation.
    """
    P = np.stack([e.params for e in experts])               # (E, dim)
    norms = np.linalg.norm(P, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero parameter vector has no direction")
    cos = (P / norms[:, None]) @ (P / norms[:, None]).T

    logits = np.einsum("nd,ed,bd->enb", calib.probes, P, calib.projection)
    dists = _softmax(logits, axis=2)                        # (E, n, buckets)
    logd = np.log(dists)
    n_probes = calib.probes.shape[0]
    mean_kl = np.zeros((len(experts), len(experts)))
    for i in range(n_probes):
        D = dists[:, i, :]
        L = logd[:, i, :]
        self_term = np.sum(D * L, axis=1)                   # (E,)
        cross = D @ L.T                                     # KL(e1||e2) pieces
        kl = self_term[:, None] - cross
        mean_kl += 0.5 * (kl + kl.T)
    mean_kl /= n_probes
    sfunc = np.clip(1.0 - mean_kl, 0.0, 1.0)
    return alpha_sim * cos + (1.0 - alpha_sim) * sfunc


# ---------------------------------------------------------------------------
# Trace JSONL import/export


def trace_to_jsonl(trace: RoutingTrace, path: str) -> None:
    with open(path, "w") as fh:
        for tok in trace.tokens:
            rec = {
                "token_id": tok.token_id,
                "layers": [{"layer": l, "experts": list(map(int, slots))}
                           for l, slots in sorted(tok.layer_experts.items())],
                "embedding": [float(v) for v in tok.embedding],
                "context": [float(v) for v in tok.context],
            }
            fh.write(json.dumps(rec) + "\n")


def trace_from_jsonl(path: str, experts_per_layer: int = None) -> RoutingTrace:
    tokens = []
    layers = None
    top_k = 1
    max_slot = -1
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            layer_experts = {int(entry["layer"]): tuple(int(s) for s in entry["experts"])
                             for entry in rec["layers"]}
            rec_layers = tuple(sorted(layer_experts))
            if layers is None:
                layers = rec_layers
            elif rec_layers != layers:
                raise ValueError("inconsistent MoE layer set across trace records")
            for slots in layer_experts.values():
                top_k = max(top_k, len(slots))
                max_slot = max(max_slot, max(slots))
            tokens.append(TokenRecord(
                token_id=int(rec["token_id"]),
                layer_experts=layer_experts,
                embedding=np.array(rec["embedding"], dtype=float),
                context=np.array(rec["context"], dtype=float)))
    if not tokens:
        raise ValueError(f"no records in trace file {path}")
    E = experts_per_layer if experts_per_layer is not None else max_slot + 1
    return RoutingTrace(tokens=tokens, experts_per_layer=E,
                        moe_layer_indices=layers, top_k=top_k)
