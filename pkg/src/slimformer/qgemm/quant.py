"""Dynamic activation and per-column weight quantization.

Activations: asymmetric u8 over the whole tensor, range recomputed on every
call.  Weights: symmetric i8 with one scale per output column.  Rounding is
half-away-from-zero everywhere so payloads are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slimformer import _backend

QMAX_W = 127
QMAX_A = 255


def round_half_away(t: np.ndarray) -> np.ndarray:
    # Same formula as the compiled kernel; keep them in sync.
    return np.copysign(np.floor(np.abs(t) + 0.5), t)


@dataclass(frozen=True)
class ActQuant:
    values: np.ndarray  # u8 [M, K]
    scale: float
    zero_point: int

    def dequantize(self) -> np.ndarray:
        return (self.values.astype(np.float64) - self.zero_point) * self.scale


@dataclass(frozen=True)
class QuantizedWeight:
    values: np.ndarray  # i8 [K, N]
    col_scales: np.ndarray  # f32 [N]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return (self.values.astype(np.float32) * self.col_scales).astype(np.float32)


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("quantization input contains non-finite values")


def activation_range(x: np.ndarray) -> tuple[float, int]:
    """Return (scale, zero_point) for an asymmetric u8 mapping of ``x``.

    The range [min, max] is widened to contain 0 so that real zero lands on
    an integer code.  An all-zero tensor gets scale 1.0 and zero point 0.
    """
    lo = min(float(x.min()), 0.0)
    hi = max(float(x.max()), 0.0)
    if hi == lo:
        return 1.0, 0
    scale = (hi - lo) / QMAX_A
    zp = int(round_half_away(np.float64(-lo / scale)))
    return scale, min(max(zp, 0), QMAX_A)


def quantize_activations_dynamic(x: np.ndarray) -> ActQuant:
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {x.shape}")
    _check_finite(x)
    scale, zp = activation_range(x)
    q = _backend.impl.quantize_u8(x, scale, zp)
    return ActQuant(q, scale, zp)


def quantize_weight_per_column(w: np.ndarray) -> QuantizedWeight:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    _check_finite(w)
    w64 = w.astype(np.float64)
    amax = np.abs(w64).max(axis=0)
    scales = (amax / QMAX_W).astype(np.float32)
    # All-zero columns, and subnormal ones whose scale underflows in f32,
    # get scale 1 (their codes round to 0).
    scales[scales == 0] = 1.0
    q = round_half_away(w64 / scales.astype(np.float64))
    q = np.clip(q, -QMAX_W, QMAX_W).astype(np.int8)
    return QuantizedWeight(q, scales)
