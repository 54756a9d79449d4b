"""Reference fp32 math kernels shared by every other module.

Tensors are plain row-major numpy arrays (f32 for inference, f64 only for
gradient verification, i8/u8 for quantized payloads).  Everything here is a
pure function of its inputs.

A thread-local multiply-accumulate counter can be switched on with
:func:`mac_counter`; every matrix product in the engine reports into it so
the analytic cost model in :mod:`slimformer.runtime` can be checked against
what the kernels actually executed.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterator, Optional

import numpy as np

GELU_COEF = 0.7978845608  # sqrt(2/pi), tanh approximation
GELU_CUBIC = 0.044715

EPILOGUES = ("none", "relu", "gelu")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_tls = threading.local()


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int) -> None:
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


@contextlib.contextmanager
def mac_counter() -> Iterator[MacCounter]:
    """Count multiply-accumulates issued by kernels on the current thread."""
    prev = getattr(_tls, "counter", None)
    counter = MacCounter()
    _tls.counter = counter
    try:
        yield counter
    finally:
        _tls.counter = prev


def record_macs(op: str, n: int) -> None:
    counter = getattr(_tls, "counter", None)
    if counter is not None:
        counter.add(op, int(n))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-approximated GELU: 0.5 x (1 + tanh(0.7978845608 (x + 0.044715 x^3)))."""
    x = np.asarray(x)
    inner = GELU_COEF * (x + GELU_CUBIC * x * x * x)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    inner = GELU_COEF * (x + GELU_CUBIC * x * x * x)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * x * x)


def apply_epilogue(x: np.ndarray, epilogue: str) -> np.ndarray:
    if epilogue == "none":
        return x
    if epilogue == "relu":
        np.maximum(x, 0, out=x)
        return x
    if epilogue == "gelu":
        return gelu(x)
    raise ValueError(f"unknown epilogue {epilogue!r}")


def gemm_f32(
    a: np.ndarray,
    b: np.ndarray,
    bias: Optional[np.ndarray] = None,
    epilogue: str = "none",
) -> np.ndarray:
    """C = epilogue(A @ B + bias), bias broadcast over rows.

    Accumulates in the dtype of the operands (f32 in inference, f64 when the
    caller is verifying gradients).
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"gemm expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if bias is not None and bias.shape != (b.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match N={b.shape[1]}")
    if epilogue not in EPILOGUES:
        raise ValueError(f"unknown epilogue {epilogue!r}")
    record_macs("gemm", a.shape[0] * a.shape[1] * b.shape[1])
    out = a @ b
    if bias is not None:
        out += bias
    return apply_epilogue(out, epilogue)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    NaN anywhere in a row propagates to the whole row.
    """
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def layer_norm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-12
) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta
