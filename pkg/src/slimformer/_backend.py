"""Kernel backend selection.

The compiled extension ``slimformer._ckernels`` is used when it was built;
otherwise the numpy implementation in ``slimformer._pykernels`` takes over.
Set ``SLIMFORMER_BACKEND=python`` (or ``cython``) to force one.  Both
backends produce bit-identical quantized GEMM results.
"""
from __future__ import annotations

import contextlib
import importlib
import os
import threading
from types import ModuleType
from typing import Iterator

_tls = threading.local()


def _load(name: str) -> ModuleType:
    module = {"cython": "slimformer._ckernels", "python": "slimformer._pykernels"}[name]
    return importlib.import_module(module)


def available() -> list[str]:
    names = []
    for name in ("cython", "python"):
        try:
            _load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select() -> tuple[str, ModuleType]:
    wanted = os.environ.get("SLIMFORMER_BACKEND", "auto").lower()
    if wanted in ("cython", "python"):
        return wanted, _load(wanted)
    try:
        return "cython", _load("cython")
    except ImportError:
        return "python", _load("python")


BACKEND, impl = _select()


def get(name: str) -> ModuleType:
    return _load(name)


@contextlib.contextmanager
def use(name: str) -> Iterator[ModuleType]:
    """Temporarily swap the active backend (process-wide; tests and benchmarks only)."""
    global BACKEND, impl
    prev = BACKEND, impl
    BACKEND, impl = name, _load(name)
    try:
        yield impl
    finally:
        BACKEND, impl = prev


def kernel_threads() -> int:
    return getattr(_tls, "threads", 1)


@contextlib.contextmanager
def worker_threads(n: int) -> Iterator[None]:
    """Set the intra-op worker count for kernels launched from this thread."""
    prev = kernel_threads()
    _tls.threads = max(1, int(n))
    try:
        yield
    finally:
        _tls.threads = prev
