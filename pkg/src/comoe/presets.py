"""Switch-Base model preset geometries.

Every preset shares the 24-layer encoder-decoder stack with MoE replacing
the FFN on odd layers: encoder (1, 3, 5, 7, 9, 11) and decoder
(13, 15, 17, 19, 21, 23), top-1 routing. They differ in experts per MoE
layer and total parameter count; per-expert bytes are back-solved from the
total so each expert lands near 10 MB at 2 bytes per parameter.
"""

from .errors import ConfigError

TOTAL_LAYERS = 24
ENCODER_MOE_LAYERS = (1, 3, 5, 7, 9, 11)
DECODER_MOE_LAYERS = (13, 15, 17, 19, 21, 23)
TOP_K = 1

SEQUENCE_LENGTHS = (128, 512, 1024)

PRESETS = {
    "sb8": {"experts_per_layer": 8, "total_params": 0.5e9},
    "sb32": {"experts_per_layer": 32, "total_params": 1.98e9},
    "sb64": {"experts_per_layer": 64, "total_params": 3.8e9},
    "sb128": {"experts_per_layer": 128, "total_params": 7.4e9},
    "sb256": {"experts_per_layer": 256, "total_params": 15.8e9},
}


def preset_names():
    return sorted(PRESETS)


def preset_geometry(name: str) -> dict:
    """Full geometry dict for a named preset."""
    if name not in PRESETS:
        raise ConfigError(
            f"unknown model preset {name!r}; choose from {preset_names()}")
    p = PRESETS[name]
    return {
        "total_layers": TOTAL_LAYERS,
        "encoder_moe_layers": list(ENCODER_MOE_LAYERS),
        "decoder_moe_layers": list(DECODER_MOE_LAYERS),
        "experts_per_layer": p["experts_per_layer"],
        "top_k": TOP_K,
        "total_params": p["total_params"],
    }


def expert_size_bytes(total_params: float, bytes_per_param: float,
                      n_moe_layers: int, experts_per_layer: int) -> float:
    """Back-solve per-expert bytes from the model's parameter total.

    Expert parameters dominate these models, so the preset attributes the
    whole count to the expert pool; the dense remainder is carried
    separately as an overhead fraction of the pool.
    """
    if n_moe_layers <= 0 or experts_per_layer <= 0:
        raise ConfigError("model needs at least one MoE layer and expert")
    return total_params * bytes_per_param / (n_moe_layers * experts_per_layer)
