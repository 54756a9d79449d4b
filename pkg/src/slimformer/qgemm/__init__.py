"""Dynamic 8-bit quantized matrix multiplication."""
from slimformer.qgemm.gemm import MAX_K, gemm_i8
from slimformer.qgemm.packing import (
    DEFAULT_KC,
    DEFAULT_NC,
    PACK_CACHE,
    IntegrityError,
    PackCache,
    PackedWeight,
    pack_weight,
)
from slimformer.qgemm.quant import (
    ActQuant,
    QuantizedWeight,
    activation_range,
    quantize_activations_dynamic,
    quantize_weight_per_column,
    round_half_away,
)

__all__ = [
    "MAX_K",
    "gemm_i8",
    "DEFAULT_KC",
    "DEFAULT_NC",
    "PACK_CACHE",
    "IntegrityError",
    "PackCache",
    "PackedWeight",
    "pack_weight",
    "ActQuant",
    "QuantizedWeight",
    "activation_range",
    "quantize_activations_dynamic",
    "quantize_weight_per_column",
    "round_half_away",
]
