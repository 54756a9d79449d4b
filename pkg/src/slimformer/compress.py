"""Compression pipeline: gradient-based importance scores, uniform structured
pruning with weight reconnection, soft cross-entropy distillation, and the
prune-ratio sweep."""
from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from slimformer.autodiff import forward_backward, loss_and_grad_logits
from slimformer.data import Dataset
from slimformer.encoder import F32, ExecPlan, Model, ModelConfig, forward, layer_prefix
from slimformer.qgemm import QuantizedWeight
from slimformer.runtime import Batch, accuracy, count_macs_batches, make_batches, predict

logger = logging.getLogger(__name__)

RATIO_STEPS = (1.0, 0.75, 0.5, 0.25)
DEFAULT_GRID = tuple(itertools.product(RATIO_STEPS, RATIO_STEPS))


@dataclass
class ImportanceScores:
    heads: np.ndarray  # [L, A]
    ffn_units: np.ndarray  # [L, F]
    examples_seen: int


@dataclass(frozen=True)
class PruneSpec:
    head_keep_ratio: float = 1.0
    ffn_keep_ratio: float = 1.0

    def __post_init__(self) -> None:
        for name in ("head_keep_ratio", "ffn_keep_ratio"):
            r = getattr(self, name)
            if not 0 < r <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {r}")

    def heads_kept(self, num_heads: int) -> int:
        return keep_count(num_heads, self.head_keep_ratio)

    def units_kept(self, ffn_size: int) -> int:
        return keep_count(ffn_size, self.ffn_keep_ratio)


def keep_count(total: int, ratio: float) -> int:
    # Tiny slack so that e.g. 100 * 0.29 (= 28.999...) floors to 29.
    return max(1, math.floor(total * ratio + 1e-9))


@dataclass
class KeepSet:
    heads: list[np.ndarray]
    ffn_units: list[np.ndarray]


def _batches_with_labels(dataset: Dataset, batch_size: int):
    batches = make_batches(dataset.sequences, batch_size, "dynamic")
    for b in batches:
        yield b, (None if dataset.labels is None else dataset.labels[b.indices])


def compute_importance(
    model: Model,
    dataset: Dataset,
    loss_kind: str = "cross_entropy",
    batch_size: int = 8,
    teacher: Optional[Model] = None,
    verify: bool = False,
) -> ImportanceScores:
    """Accumulate |d loss / d mask| per head and per FFN unit over the dataset.

    All masks sit at 1; the absolute value is taken per batch, then summed.
    ``loss_kind="kd_soft_ce"`` scores against ``teacher``'s logits instead of
    the labels.
    """
    if len(dataset) == 0:
        raise ValueError("importance scoring needs a non-empty dataset")
    if loss_kind == "kd_soft_ce" and teacher is None:
        raise ValueError("kd_soft_ce scoring needs a teacher model")
    cfg = model.config
    params = model.dense_params(np.float64 if verify else np.float32)
    heads = np.zeros((cfg.num_layers, cfg.num_heads))
    units = np.zeros((cfg.num_layers, cfg.ffn_size))
    for batch, labels in _batches_with_labels(dataset, batch_size):
        t_logits = forward(teacher, batch) if loss_kind == "kd_soft_ce" else None
        _, grads, _ = forward_backward(cfg, params, batch.ids, batch.mask, loss_kind, labels, t_logits)
        heads += np.abs(np.stack(grads.head_mask)).astype(np.float64)
        units += np.abs(np.stack(grads.ffn_mask)).astype(np.float64)
    return ImportanceScores(heads, units, len(dataset))


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    # Highest scores first; equal scores go to the lower index.
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:k])


def select_keep(scores: ImportanceScores, spec: PruneSpec) -> KeepSet:
    """Per layer, the ascending indices of the top-scoring heads and units."""
    kh = spec.heads_kept(scores.heads.shape[1])
    ku = spec.units_kept(scores.ffn_units.shape[1])
    return KeepSet([_top_k(row, kh) for row in scores.heads], [_top_k(row, ku) for row in scores.ffn_units])


def keep_all(config: ModelConfig) -> KeepSet:
    return KeepSet(
        [np.arange(config.num_heads)] * config.num_layers,
        [np.arange(config.ffn_size)] * config.num_layers,
    )


def _cols(t, idx):
    if isinstance(t, QuantizedWeight):
        return QuantizedWeight(np.ascontiguousarray(t.values[:, idx]), t.col_scales[idx].copy())
    return np.ascontiguousarray(t[..., idx])


def _rows(t, idx):
    if isinstance(t, QuantizedWeight):
        return QuantizedWeight(np.ascontiguousarray(t.values[idx]), t.col_scales.copy())
    return np.ascontiguousarray(t[idx])


def apply_prune(model: Model, keep: KeepSet) -> Model:
    """Re-group the surviving heads and units into a smaller dense model.

    Head width stays the same; Q/K/V lose columns, O loses rows, the FFN
    input matrix loses columns and the output matrix loses rows.
    """
    cfg = model.config
    if len(keep.heads) != cfg.num_layers or len(keep.ffn_units) != cfg.num_layers:
        raise ValueError("keep set must list every layer")
    n_heads = {len(h) for h in keep.heads}
    n_units = {len(u) for u in keep.ffn_units}
    if len(n_heads) != 1 or len(n_units) != 1:
        raise ValueError("every layer must keep the same number of heads and of FFN units")
    a_new, f_new = n_heads.pop(), n_units.pop()
    if a_new < 1 or f_new < 1:
        raise ValueError("must keep at least one head and one FFN unit per layer")
    d = cfg.head_dim
    params = dict(model.params)
    for layer in range(cfg.num_layers):
        heads = np.asarray(keep.heads[layer], dtype=np.int64)
        units = np.asarray(keep.ffn_units[layer], dtype=np.int64)
        if heads.min() < 0 or heads.max() >= cfg.num_heads or len(np.unique(heads)) != len(heads):
            raise ValueError(f"layer {layer}: invalid head indices {heads}")
        if units.min() < 0 or units.max() >= cfg.ffn_size or len(np.unique(units)) != len(units):
            raise ValueError(f"layer {layer}: invalid FFN unit indices")
        cols = (heads[:, None] * d + np.arange(d)[None, :]).ravel()
        p = layer_prefix(layer)
        for proj in "qkv":
            params[f"{p}.attn.{proj}.weight"] = _cols(params[f"{p}.attn.{proj}.weight"], cols)
            params[f"{p}.attn.{proj}.bias"] = params[f"{p}.attn.{proj}.bias"][cols].copy()
        params[f"{p}.attn.o.weight"] = _rows(params[f"{p}.attn.o.weight"], cols)
        params[f"{p}.ffn.in.weight"] = _cols(params[f"{p}.ffn.in.weight"], units)
        params[f"{p}.ffn.in.bias"] = params[f"{p}.ffn.in.bias"][units].copy()
        params[f"{p}.ffn.out.weight"] = _rows(params[f"{p}.ffn.out.weight"], units)
    config = cfg.replace(num_heads=a_new, ffn_size=f_new, head_dim=d)
    return Model(config, params)


def masks_for(config: ModelConfig, keep: KeepSet) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Head and FFN masks (1 kept, 0 dropped) equivalent to ``keep``."""
    hm, fm = [], []
    for layer in range(config.num_layers):
        h = np.zeros(config.num_heads, dtype=np.float32)
        h[keep.heads[layer]] = 1
        u = np.zeros(config.ffn_size, dtype=np.float32)
        u[keep.ffn_units[layer]] = 1
        hm.append(h)
        fm.append(u)
    return hm, fm


def prune(model: Model, scores: ImportanceScores, spec: PruneSpec) -> Model:
    return apply_prune(model, select_keep(scores, spec))


# ------------------------------------------------------------- distillation


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0) -> float:
    """Mean over examples of -sum_c softmax(t/T)_c log softmax(s/T)_c."""
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: student {s.shape}, teacher {t.shape}")
    return loss_and_grad_logits(s, "kd_soft_ce", teacher_logits=t, temperature=temperature)[0]


def kd_loss_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    s = np.asarray(student_logits, dtype=np.float64)
    return loss_and_grad_logits(s, "kd_soft_ce", teacher_logits=np.asarray(teacher_logits, np.float64),
                                temperature=temperature)[1]


@dataclass(frozen=True)
class KDConfig:
    steps: int = 1000
    lr: float = 0.1
    batch_size: int = 16
    momentum: float = 0.9
    temperature: float = 1.0
    seed: int = 0
    clip_norm: Optional[float] = 1.0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.lr < 0 or self.batch_size < 1 or self.temperature <= 0:
            raise ValueError("steps, lr must be >= 0; batch_size >= 1; temperature > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)


def _sgd(
    model: Model,
    dataset: Dataset,
    cfg: KDConfig,
    loss_kind: str,
    teacher: Optional[Model] = None,
) -> TrainResult:
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.dense_params(np.float32)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n = len(dataset)
    losses = []
    for _ in range(cfg.steps):
        idx = np.arange(n) if cfg.batch_size >= n else np.sort(rng.choice(n, cfg.batch_size, replace=False))
        batch = Batch.from_sequences([dataset.sequences[i] for i in idx])
        labels = None if dataset.labels is None else dataset.labels[idx]
        t_logits = forward(teacher, batch) if teacher is not None else None
        loss, grads, _ = forward_backward(
            model.config, params, batch.ids, batch.mask, loss_kind, labels, t_logits, cfg.temperature
        )
        losses.append(loss)
        g = grads.params
        scale = 1.0
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(v, v)) for v in g.values()))
            if norm > cfg.clip_norm:
                scale = cfg.clip_norm / norm
        for name, value in params.items():
            vel = velocity[name]
            vel *= np.float32(cfg.momentum)
            vel += g[name] * np.float32(scale)
            value -= np.float32(cfg.lr) * vel
    return TrainResult(Model(model.config, params), losses)


def finetune(model: Model, dataset: Dataset, cfg: KDConfig) -> TrainResult:
    """Task training with cross-entropy on the dataset labels."""
    if dataset.labels is None:
        raise ValueError("finetuning needs labels")
    return _sgd(model, dataset, cfg, "cross_entropy")


def distill(teacher: Model, student: Model, dataset: Dataset, cfg: KDConfig) -> TrainResult:
    """Train ``student`` to match ``teacher``'s softened output distribution.

    Teacher logits are computed on the fly per minibatch.  Deterministic for
    a fixed ``cfg.seed``.  Student geometry may differ in every dimension
    except vocabulary and class count.
    """
    if teacher.config.num_classes != student.config.num_classes:
        raise ValueError(
            f"class count mismatch: teacher {teacher.config.num_classes}, student {student.config.num_classes}"
        )
    if teacher.config.vocab_size != student.config.vocab_size:
        raise ValueError("teacher and student must share a vocabulary")
    return _sgd(student, dataset, cfg, "kd_soft_ce", teacher)


def evaluate(model: Model, dataset: Dataset, plan: ExecPlan = F32, batch_size: int = 1) -> float:
    return accuracy(predict(model, dataset.sequences, plan, batch_size), dataset.labels)


# -------------------------------------------------------------------- sweep


@dataclass
class SweepPoint:
    head_ratio: float
    ffn_ratio: float
    mac_ratio: float
    accuracy: float
    seconds: float
    macs: int
    num_heads: int
    ffn_size: int


def sweep_prune_tradeoff(
    model: Model,
    dataset: Dataset,
    ratio_grid: Sequence[tuple[float, float]] = DEFAULT_GRID,
    scores: Optional[ImportanceScores] = None,
    redistill: Optional[KDConfig] = None,
    plan: ExecPlan = F32,
    batch_size: int = 1,
) -> list[SweepPoint]:
    """Prune at every (head ratio, FFN ratio) grid point and measure cost and accuracy.

    Importance is scored once on ``dataset``.  With ``redistill`` each pruned
    model is distilled again from the unpruned one before evaluation.
    """
    if not ratio_grid:
        raise ValueError("ratio grid is empty")
    if scores is None:
        scores = compute_importance(model, dataset)
    batches = make_batches(dataset.sequences, batch_size, "dynamic")
    base_macs = count_macs_batches(model.config, batches)
    points = []
    for head_ratio, ffn_ratio in ratio_grid:
        pruned = prune(model, scores, PruneSpec(head_ratio, ffn_ratio))
        if redistill is not None:
            pruned = distill(model, pruned, dataset, redistill).model
        macs = count_macs_batches(pruned.config, batches)
        start = time.perf_counter()
        acc = evaluate(pruned, dataset, plan, batch_size)
        seconds = time.perf_counter() - start
        points.append(
            SweepPoint(head_ratio, ffn_ratio, macs / base_macs, acc, seconds, macs,
                       pruned.config.num_heads, pruned.config.ffn_size)
        )
        logger.info("prune %.2f/%.2f -> %d heads, %d units, acc %.4f", head_ratio, ffn_ratio,
                    pruned.config.num_heads, pruned.config.ffn_size, acc)
    return points


def write_sweep_csv(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["head_ratio", "ffn_ratio", "mac_ratio", "accuracy", "seconds"])
        for p in points:
            acc = "" if math.isnan(p.accuracy) else f"{p.accuracy:.4f}"
            w.writerow([p.head_ratio, p.ffn_ratio, f"{p.mac_ratio:.6f}", acc, f"{p.seconds:.6f}"])
