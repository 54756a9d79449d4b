"""Pure numpy kernels; the fallback when the compiled extension is absent.

The quantized GEMM reproduces the compiled kernel bit for bit: the integer
accumulator is formed exactly (f32 BLAS over K chunks small enough that every
partial sum is an integer below 2**24), and the epilogue uses the same f64
operation order.
"""
from __future__ import annotations

import threading
import weakref

import numpy as np

# 512 * 255 * 127 < 2**24: every chunk product is exact in f32.
_EXACT_CHUNK = 512

_f32_lock = threading.Lock()
_f32_weights: dict[int, tuple[weakref.ref, np.ndarray]] = {}


def _round_half_away(t: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(t) + 0.5), t)


def quantize_u8(x: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    q = _round_half_away(x.astype(np.float64) / scale) + zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def _unpacked_f32(payload: np.ndarray, k: int, n: int, kc: int, nc: int) -> np.ndarray:
    # The f32 view of a pack is this backend's own packed form; build it once.
    key = id(payload)
    with _f32_lock:
        hit = _f32_weights.get(key)
        if hit is not None and hit[0]() is payload:
            return hit[1]
    kb, nb = -(-k // kc), -(-n // nc)
    full = payload.reshape(kb, nb, kc, nc).transpose(0, 2, 1, 3).reshape(kb * kc, nb * nc)
    w32 = np.ascontiguousarray(full[:k], dtype=np.float32)
    with _f32_lock:
        _f32_weights[key] = (weakref.ref(payload, lambda _r, key=key: _f32_weights.pop(key, None)), w32)
    return w32


def gemm_i8_packed(a, zero_point, a_scale, payload, k, n, kc, nc, col_scales, bias, relu, nthreads=1):
    m = a.shape[0]
    w32 = _unpacked_f32(payload, k, n, kc, nc)
    centered = a.astype(np.float32) - np.float32(zero_point)
    if k <= _EXACT_CHUNK:
        acc = (centered @ w32)[:, :n].astype(np.float64)
    else:
        acc64 = np.zeros((m, w32.shape[1]), dtype=np.int64)
        for k0 in range(0, k, _EXACT_CHUNK):
            k1 = min(k0 + _EXACT_CHUNK, k)
            acc64 += (centered[:, k0:k1] @ w32[k0:k1]).astype(np.int64)
        acc = acc64[:, :n].astype(np.float64)
    y = acc * (float(a_scale) * col_scales.astype(np.float64))
    if bias is not None:
        y += bias.astype(np.float64)
    out = y.astype(np.float32)
    if relu:
        np.maximum(out, 0, out=out)
    return out


def fused_attention(q, k, v, mask_add, head_mask, b, s, a, d, scale, nthreads=1):
    """Scaled dot-product attention over all heads without materialising
    separate score/probability passes.  q, k, v are (b*s, a*d) row views."""
    qh = (q.reshape(b, s, a, d) * np.float32(scale)).transpose(0, 2, 1, 3)
    kh = k.reshape(b, s, a, d).transpose(0, 2, 3, 1)
    vh = v.reshape(b, s, a, d).transpose(0, 2, 1, 3)
    scores = np.matmul(qh, kh)
    scores += mask_add[:, None, None, :]
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    ctx = np.matmul(scores, vh)
    if head_mask is not None:
        ctx *= head_mask[None, :, None, None]
    return np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b * s, a * d)
