from __future__ import annotations

from typing import Optional

import numpy as np

from slimformer import _backend
from slimformer.qgemm.packing import PackedWeight
from slimformer.qgemm.quant import ActQuant
from slimformer.tensor import ShapeError, record_macs

# Each K panel is summed in i32 (KC * 255 * 127 stays far below 2**31) and
# panels are folded into an i64 accumulator, so K up to 2**24 is exact.
MAX_K = 2**24


def gemm_i8(
    a: ActQuant,
    w: PackedWeight,
    bias: Optional[np.ndarray] = None,
    epilogue: str = "none",
    threads: Optional[int] = None,
) -> np.ndarray:
    """Quantized GEMM with the bias/activation epilogue fused into the output loop.

    C[i, j] = a.scale * col_scales[j] * sum_k (a[i, k] - zp) * w[k, j] + bias[j]
    """
    m, k = a.values.shape
    if k != w.k:
        raise ShapeError(f"inner dimensions differ: {a.values.shape} x ({w.k}, {w.n})")
    if k > MAX_K:
        raise ValueError(f"K={k} exceeds the exact-accumulation bound {MAX_K}")
    if epilogue not in ("none", "relu"):
        raise ValueError(f"gemm_i8 supports epilogues 'none' and 'relu', got {epilogue!r}")
    if bias is not None:
        bias = np.ascontiguousarray(bias, dtype=np.float32)
        if bias.shape != (w.n,):
            raise ShapeError(f"bias shape {bias.shape} does not match N={w.n}")
    record_macs("gemm_i8", m * k * w.n)
    return _backend.impl.gemm_i8_packed(
        np.ascontiguousarray(a.values, dtype=np.uint8),
        int(a.zero_point),
        float(a.scale),
        w.payload,
        w.k,
        w.n,
        w.kc,
        w.nc,
        w.col_scales,
        bias,
        epilogue == "relu",
        _backend.kernel_threads() if threads is None else threads,
    )
