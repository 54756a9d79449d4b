"""Inference-time machinery: dynamic-length batching, analytic MAC counts,
multi-instance scheduling and the ablation / instance-sweep benchmarks."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from slimformer import _backend
from slimformer.encoder import F32, ExecPlan, InputError, Model, ModelConfig, forward

logger = logging.getLogger(__name__)

BATCH_MODES = ("fixed_pad", "dynamic", "dynamic_sorted")
PAD_ID = 0

# Cumulative speed-ups of the reference ablation chain (BoolQ, 8-core CPU),
# shown next to measured numbers for comparison only.
REFERENCE_CUMULATIVE = (1.00, 3.51, 32.64, 73.66, 129.29, 178.67, 233.87)


class PlanError(ValueError):
    """An instance plan oversubscribes its physical core budget."""


@dataclass
class Batch:
    """Token ids padded to the batch's own length (or a fixed length).

    ``indices`` maps each row back to its position in the source corpus.
    """

    ids: np.ndarray
    mask: np.ndarray
    indices: np.ndarray
    lengths: np.ndarray

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]

    @classmethod
    def from_sequences(
        cls,
        sequences: Sequence[Sequence[int]],
        pad_to: Optional[int] = None,
        indices: Optional[Sequence[int]] = None,
    ) -> "Batch":
        lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        if len(lengths) == 0:
            raise ValueError("cannot build an empty batch")
        if lengths.min() < 1:
            raise InputError("sequences must contain at least one token")
        width = int(lengths.max()) if pad_to is None else int(pad_to)
        if lengths.max() > width:
            raise InputError(f"sequence of length {lengths.max()} does not fit pad length {width}")
        ids = np.full((len(sequences), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(sequences), width), dtype=np.int8)
        for row, seq in enumerate(sequences):
            ids[row, : len(seq)] = seq
            mask[row, : len(seq)] = 1
        if indices is None:
            indices = np.arange(len(sequences))
        return cls(ids, mask, np.asarray(indices, dtype=np.int64), lengths)


def make_batches(
    corpus: Sequence[Sequence[int]],
    batch_size: int = 1,
    mode: str = "dynamic",
    pad_to: Optional[int] = None,
    max_seq_len: Optional[int] = None,
) -> list[Batch]:
    """Split a corpus into padded batches.

    fixed_pad pads every batch to ``pad_to``; dynamic pads each batch to its
    own longest member; dynamic_sorted sorts by length first (stable) so that
    similar lengths share a batch.  Every batch carries the corpus indices of
    its rows; :func:`restore_order` puts per-batch outputs back in input order.
    """
    if mode not in BATCH_MODES:
        raise ValueError(f"mode must be one of {BATCH_MODES}, got {mode!r}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if mode == "fixed_pad" and pad_to is None:
        raise ValueError("fixed_pad needs pad_to")
    lengths = np.array([len(s) for s in corpus], dtype=np.int64)
    limit = max_seq_len if max_seq_len is not None else None
    if limit is not None and len(lengths) and lengths.max() > limit:
        bad = int(np.argmax(lengths > limit))
        raise InputError(f"sequence {bad} has length {lengths[bad]} > max_seq_len={limit}")
    order = np.argsort(lengths, kind="stable") if mode == "dynamic_sorted" else np.arange(len(corpus))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(
            Batch.from_sequences(
                [corpus[i] for i in idx],
                pad_to=pad_to if mode == "fixed_pad" else None,
                indices=idx,
            )
        )
    return batches


def restore_order(batches: Sequence[Batch], outputs: Sequence[np.ndarray]) -> np.ndarray:
    n = sum(b.size for b in batches)
    if n == 0:
        return np.zeros((0, 0), dtype=np.float32)
    result = np.empty((n,) + outputs[0].shape[1:], dtype=outputs[0].dtype)
    for batch, out in zip(batches, outputs):
        result[batch.indices] = out
    return result


# ---------------------------------------------------------------- MAC model


def layer_macs(config: ModelConfig, seq_len: int) -> int:
    """MACs of one encoder layer for one sequence of computed length s.

    Q, K, V and O projections: 4 * s * H * D (D = heads * head_dim, = H when
    unpruned); scores and context: 2 * s^2 * D; FFN: 2 * s * H * F.
    """
    s, hid, dim, ffn = seq_len, config.hidden, config.attn_dim, config.ffn_size
    return 4 * s * hid * dim + 2 * s * s * dim + 2 * s * hid * ffn


def head_macs(config: ModelConfig) -> int:
    """Pooler (first token only) plus classifier, per sequence.  Embedding
    lookups and layer norms cost no multiply-accumulates in this model."""
    return config.hidden * config.hidden + config.hidden * config.num_classes


def count_macs(config: ModelConfig, batch: Batch, include_head: bool = True) -> int:
    """Exact MACs the engine issues for ``batch``.

    Every row is computed at the batch's padded length, so padding is paid
    for; this is what makes dynamic batching measurable as arithmetic.
    """
    per_seq = config.num_layers * layer_macs(config, batch.seq_len)
    if include_head:
        per_seq += head_macs(config)
    return batch.size * per_seq


def count_macs_batches(config: ModelConfig, batches: Iterable[Batch]) -> int:
    return sum(count_macs(config, b) for b in batches)


# --------------------------------------------------------- multi-instance


@dataclass(frozen=True)
class InstancePlan:
    num_instances: int = 1
    threads_per_instance: int = 1
    core_budget: int = field(default_factory=lambda: os.cpu_count() or 1)

    def __post_init__(self) -> None:
        if self.num_instances < 1 or self.threads_per_instance < 1 or self.core_budget < 1:
            raise PlanError("instances, threads and core budget must all be >= 1")
        if self.num_instances * self.threads_per_instance > self.core_budget:
            raise PlanError(
                f"{self.num_instances} instances x {self.threads_per_instance} threads = "
                f"{self.num_instances * self.threads_per_instance} exceeds {self.core_budget} physical cores"
            )

    def cores_for(self, instance: int) -> list[int]:
        t = self.threads_per_instance
        return list(range(instance * t, (instance + 1) * t))


def _shard(costs: np.ndarray, n: int, balance: str) -> list[np.ndarray]:
    positions = np.arange(len(costs))
    if balance == "contiguous":
        return [np.asarray(s, dtype=np.int64) for s in np.array_split(positions, n)]
    if balance != "length":
        raise ValueError(f"balance must be 'contiguous' or 'length', got {balance!r}")
    load = np.zeros(n)
    owner = np.empty(len(costs), dtype=np.int64)
    for i in np.argsort(-costs, kind="stable"):
        j = int(np.argmin(load))
        owner[i] = j
        load[j] += costs[i]
    return [positions[owner == j] for j in range(n)]


def shard_corpus(corpus: Sequence[Sequence[int]], n: int, balance: str = "contiguous") -> list[np.ndarray]:
    """Partition corpus positions into n shards.

    contiguous: consecutive runs whose sizes differ by at most one.
    length: greedy longest-first assignment by quadratic length cost; each
    shard keeps its members in input order.
    """
    return _shard(np.array([_cost(1, len(s)) for s in corpus]), n, balance)


def _cost(rows: int, seq_len: int) -> float:
    return rows * (seq_len + seq_len**2 / 64.0)


def _pin_current_thread(cores: Sequence[int], available: Sequence[int]) -> bool:
    # Best effort: Linux applies sched_setaffinity(0, ...) to the calling thread.
    if not hasattr(os, "sched_setaffinity") or not available:
        return False
    try:
        os.sched_setaffinity(0, {available[c % len(available)] for c in cores})
    except OSError:
        return False
    return True


@dataclass
class MultiInstanceResult:
    logits: np.ndarray
    seconds: float
    shard_sizes: list[int]
    pinned: bool


def predict(
    model: Model,
    corpus: Sequence[Sequence[int]],
    exec_plan: ExecPlan = F32,
    batch_size: int = 1,
    mode: str = "dynamic",
    pad_to: Optional[int] = None,
) -> np.ndarray:
    """Logits for every sequence, in input order, on the calling thread."""
    if len(corpus) == 0:
        return np.zeros((0, model.config.num_classes), dtype=np.float32)
    batches = make_batches(corpus, batch_size, mode, pad_to, model.config.max_seq_len)
    return restore_order(batches, [forward(model, b, exec_plan) for b in batches])


def run_multi_instance(
    model: Model,
    corpus: Sequence[Sequence[int]],
    plan: InstancePlan,
    exec_plan: ExecPlan = F32,
    batch_size: int = 1,
    mode: str = "dynamic",
    pad_to: Optional[int] = None,
    balance: str = "contiguous",
    pin: bool = True,
) -> MultiInstanceResult:
    """Run N independent instances over disjoint shards of the corpus.

    Instances are threads sharing the immutable model and the packing cache.
    Each owns T kernel workers (compiled kernels get T OpenMP threads, BLAS is
    limited to T threads) and, where the platform allows, is pinned to its
    own slice of cores.  Outputs come back in input order.
    """
    # Batches are formed over the whole corpus before sharding, and shards
    # own whole batches, so every plan runs exactly the same batches.
    start = time.perf_counter()
    batches = make_batches(corpus, batch_size, mode, pad_to, model.config.max_seq_len) if len(corpus) else []
    shards = _shard(np.array([_cost(b.size, b.seq_len) for b in batches]), plan.num_instances, balance)
    n_classes = model.config.num_classes
    logits = np.zeros((len(corpus), n_classes), dtype=np.float32)
    available = sorted(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else []
    pinned: list[bool] = []

    def instance(idx: int, owned: np.ndarray) -> None:
        if pin:
            pinned.append(_pin_current_thread(plan.cores_for(idx), available))
        with _backend.worker_threads(plan.threads_per_instance):
            for j in owned:
                b = batches[j]
                logits[b.indices] = forward(model, b, exec_plan)

    with threadpool_limits(limits=plan.threads_per_instance, user_api="blas"):
        with ThreadPoolExecutor(max_workers=plan.num_instances) as pool:
            futures = [pool.submit(instance, i, shard) for i, shard in enumerate(shards)]
            for fut in futures:
                fut.result()
        seconds = time.perf_counter() - start
    sizes = [int(sum(batches[j].size for j in shard)) for shard in shards]
    return MultiInstanceResult(logits, seconds, sizes, bool(pinned) and all(pinned))


@dataclass
class SweepRow:
    instances: int
    threads_per_instance: int
    seconds: float
    speedup: float


def instance_sweep(
    model: Model,
    corpus: Sequence[Sequence[int]],
    core_budget: int,
    instance_counts: Sequence[int] = (1, 2, 4, 8),
    exec_plan: ExecPlan = F32,
    batch_size: int = 1,
    mode: str = "dynamic",
) -> list[SweepRow]:
    """Time the corpus under N instances x (budget // N) threads for each N.

    The first row is the baseline the speed-ups are relative to.
    """
    rows: list[SweepRow] = []
    for n in instance_counts:
        plan = InstancePlan(n, max(1, core_budget // n), core_budget)
        res = run_multi_instance(model, corpus, plan, exec_plan, batch_size, mode)
        base = rows[0].seconds if rows else res.seconds
        rows.append(SweepRow(n, plan.threads_per_instance, res.seconds, base / res.seconds))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["instances", "threads_per_instance", "seconds", "speedup"])
        for r in rows:
            w.writerow([r.instances, r.threads_per_instance, f"{r.seconds:.6f}", f"{r.speedup:.4f}"])


# ----------------------------------------------------------------- ablation


@dataclass
class Stage:
    label: str
    model: Model
    exec_plan: ExecPlan = F32
    mode: str = "dynamic"
    pad_to: Optional[int] = None
    instances: InstancePlan = field(default_factory=InstancePlan)
    batch_size: int = 1


@dataclass
class BenchRow:
    stage: str
    seconds: float
    stage_speedup: float
    cumulative_speedup: float
    accuracy: float
    mac_ratio: float
    macs: int
    reference_speedup: Optional[float] = None


@dataclass
class BenchReport:
    rows: list[BenchRow]
    pinned: bool = False

    COLUMNS = ("stage", "seconds", "stage_speedup", "cumulative_speedup", "accuracy", "mac_ratio")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                acc = "" if math.isnan(r.accuracy) else f"{r.accuracy:.4f}"
                w.writerow([r.stage, f"{r.seconds:.6f}", f"{r.stage_speedup:.4f}",
                            f"{r.cumulative_speedup:.4f}", acc, f"{r.mac_ratio:.6f}"])

    def format(self) -> str:
        head = f"{'stage':<48} {'seconds':>10} {'stage x':>8} {'cum x':>8} {'acc':>7} {'MAC ratio':>10} {'ref cum x':>10}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            ref = "" if r.reference_speedup is None else f"{r.reference_speedup:.2f}"
            acc = "n/a" if math.isnan(r.accuracy) else f"{r.accuracy:.4f}"
            lines.append(
                f"{r.stage:<48} {r.seconds:>10.4f} {r.stage_speedup:>8.2f} {r.cumulative_speedup:>8.2f} "
                f"{acc:>7} {r.mac_ratio:>10.4f} {ref:>10}"
            )
        return "\n".join(lines)


def accuracy(logits: np.ndarray, labels: Optional[Sequence[int]]) -> float:
    if labels is None or len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def run_ablation(
    stages: Sequence[Stage],
    corpus: Sequence[Sequence[int]],
    labels: Optional[Sequence[int]] = None,
    warmup: bool = True,
    repeats: int = 1,
    references: Sequence[float] = REFERENCE_CUMULATIVE,
) -> BenchReport:
    """Time each stage on the corpus; the first stage is the baseline.

    Seconds are the minimum over ``repeats`` runs after one warm-up batch
    (which also fills the packing cache, as a deployed server would).
    """
    rows: list[BenchRow] = []
    all_pinned = True
    for i, st in enumerate(stages):
        batches = make_batches(corpus, st.batch_size, st.mode, st.pad_to, st.model.config.max_seq_len)
        macs = count_macs_batches(st.model.config, batches)
        if warmup and len(corpus):
            predict(st.model, corpus[: st.batch_size], st.exec_plan, st.batch_size, st.mode, st.pad_to)
        best = None
        for _ in range(max(1, repeats)):
            res = run_multi_instance(st.model, corpus, st.instances, st.exec_plan, st.batch_size, st.mode, st.pad_to)
            if best is None or res.seconds < best.seconds:
                best = res
        all_pinned &= best.pinned
        base = rows[0] if rows else None
        prev = rows[-1] if rows else None
        rows.append(
            BenchRow(
                stage=st.label,
                seconds=best.seconds,
                stage_speedup=prev.seconds / best.seconds if prev else 1.0,
                cumulative_speedup=base.seconds / best.seconds if base else 1.0,
                accuracy=accuracy(best.logits, labels),
                mac_ratio=macs / base.macs if base else 1.0,
                macs=macs,
                reference_speedup=references[i] if i < len(references) else None,
            )
        )
        logger.info("stage %-40s %.4fs", st.label, best.seconds)
    return BenchReport(rows, pinned=all_pinned)
