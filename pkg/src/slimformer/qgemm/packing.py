"""Cache-blocked weight packing with a process-wide memo.

Packed layout: the (K x N) int8 matrix is cut into panels of KC x NC
elements.  Panels are stored in row-of-panels order (all column panels of
the first K block, then the next K block), each panel row-major, with edge
panels zero padded to the full block size.  Block sizes are clamped to the
matrix dimensions so tiny matrices do not carry a full 256 x 64 panel.

Model files never store this layout; they keep plain row-major i8 values and
packing happens lazily at run time, once per weight.
"""
from __future__ import annotations

import hashlib
import os
import threading
from dataclasses import dataclass
from typing import Callable, Hashable

import numpy as np

from slimformer.qgemm.quant import QuantizedWeight

DEFAULT_KC = int(os.environ.get("SLIMFORMER_KC", 256))
DEFAULT_NC = int(os.environ.get("SLIMFORMER_NC", 64))


class IntegrityError(RuntimeError):
    """A cached pack exists for this source id but the payload differs."""


@dataclass(frozen=True)
class PackedWeight:
    source_id: Hashable
    payload: np.ndarray  # flat i8
    k: int
    n: int
    kc: int
    nc: int
    col_scales: np.ndarray  # f32 [N]
    digest: bytes

    @property
    def k_blocks(self) -> int:
        return -(-self.k // self.kc)

    @property
    def n_blocks(self) -> int:
        return -(-self.n // self.nc)

    def panel(self, kb: int, jb: int) -> np.ndarray:
        size = self.kc * self.nc
        off = (kb * self.n_blocks + jb) * size
        return self.payload[off : off + size].reshape(self.kc, self.nc)

    def unpack(self) -> QuantizedWeight:
        grid = self.payload.reshape(self.k_blocks, self.n_blocks, self.kc, self.nc)
        full = grid.transpose(0, 2, 1, 3).reshape(self.k_blocks * self.kc, self.n_blocks * self.nc)
        return QuantizedWeight(np.ascontiguousarray(full[: self.k, : self.n]), self.col_scales.copy())


def _digest(wq: QuantizedWeight) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    h.update(np.asarray(wq.values.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(wq.values).tobytes())
    h.update(np.ascontiguousarray(wq.col_scales, dtype=np.float32).tobytes())
    return h.digest()


def _tile(wq: QuantizedWeight, source_id: Hashable, kc: int, nc: int) -> PackedWeight:
    k, n = wq.values.shape
    kc = max(1, min(kc, k))
    nc = max(1, min(nc, n))
    kb, nb = -(-k // kc), -(-n // nc)
    padded = np.zeros((kb * kc, nb * nc), dtype=np.int8)
    padded[:k, :n] = wq.values
    payload = padded.reshape(kb, kc, nb, nc).transpose(0, 2, 1, 3).ravel().copy()
    return PackedWeight(
        source_id=source_id,
        payload=payload,
        k=k,
        n=n,
        kc=kc,
        nc=nc,
        col_scales=np.ascontiguousarray(wq.col_scales, dtype=np.float32),
        digest=_digest(wq),
    )


class PackCache:
    """Memo of packed weights keyed by a stable source id.

    Readers run concurrently; for each id exactly one thread tiles the
    weight while later arrivals block on it and then reuse the result.
    ``misses`` therefore counts distinct ids packed.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[Hashable, PackedWeight] = {}
        self._pending: dict[Hashable, threading.Event] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, source_id: Hashable) -> bool:
        return source_id in self._entries

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self.hits = 0
            self.misses = 0

    def reset_counters(self) -> None:
        with self._lock:
            self.hits = 0
            self.misses = 0

    def evict(self, predicate: Callable[[Hashable], bool]) -> int:
        with self._lock:
            doomed = [key for key in self._entries if predicate(key)]
            for key in doomed:
                del self._entries[key]
        return len(doomed)

    def get_or_pack(
        self,
        source_id: Hashable,
        make: Callable[[], QuantizedWeight],
        kc: int = DEFAULT_KC,
        nc: int = DEFAULT_NC,
    ) -> PackedWeight:
        while True:
            with self._lock:
                entry = self._entries.get(source_id)
                if entry is not None:
                    self.hits += 1
                    return entry
                event = self._pending.get(source_id)
                owner = event is None
                if owner:
                    event = threading.Event()
                    self._pending[source_id] = event
                    self.misses += 1
            if not owner:
                event.wait()
                continue  # re-check; if the owner failed, this thread retries
            try:
                packed = _tile(make(), source_id, kc, nc)
                with self._lock:
                    self._entries[source_id] = packed
                return packed
            finally:
                with self._lock:
                    del self._pending[source_id]
                event.set()


PACK_CACHE = PackCache()


def pack_weight(
    wq: QuantizedWeight,
    source_id: Hashable,
    cache: PackCache | None = None,
    kc: int = DEFAULT_KC,
    nc: int = DEFAULT_NC,
) -> PackedWeight:
    """Pack ``wq`` once per ``source_id``; later calls return the cached pack.

    Raises IntegrityError if ``source_id`` was already used for a different
    payload or block geometry.
    """
    cache = PACK_CACHE if cache is None else cache
    packed = cache.get_or_pack(source_id, lambda: wq, kc, nc)
    if packed.digest != _digest(wq):
        raise IntegrityError(f"source id {source_id!r} already packed with a different payload")
    k, n = wq.values.shape
    if (packed.kc, packed.nc) != (max(1, min(kc, k)), max(1, min(nc, n))):
        raise IntegrityError(f"source id {source_id!r} already packed with other block sizes")
    return packed
