"""BERT-style post-LN encoder classifier.

Weights live in a flat name -> tensor mapping (the same names the model file
uses).  Constant weight matrices may be stored either as f32 arrays or as
pre-quantized :class:`~slimformer.qgemm.QuantizedWeight`; the forward pass
picks the matching kernel for the requested :class:`ExecPlan`.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
import threading
import warnings
import weakref
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from slimformer import _backend
from slimformer.qgemm import (
    PACK_CACHE,
    PackCache,
    PackedWeight,
    QuantizedWeight,
    gemm_i8,
    quantize_activations_dynamic,
    quantize_weight_per_column,
)
from slimformer.tensor import (
    apply_epilogue,
    gemm_f32,
    layer_norm,
    record_macs,
    softmax_rows,
)

ACTIVATIONS = ("gelu", "relu")
PAD_PENALTY = -1e4

Tensor = Union[np.ndarray, QuantizedWeight]


class InputError(ValueError):
    """Token ids or sequence lengths are outside what the model accepts."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden: int
    num_heads: int
    ffn_size: int
    vocab_size: int
    max_seq_len: int
    num_classes: int
    activation: str = "gelu"
    ln_eps: float = 1e-12
    # Defaults to hidden // num_heads.  Pruned models keep the original head
    # width while num_heads shrinks, so it is carried explicitly.
    head_dim: Optional[int] = None

    def __post_init__(self) -> None:
        dims = {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "num_heads": self.num_heads,
            "ffn_size": self.ffn_size,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "num_classes": self.num_classes,
        }
        for name, value in dims.items():
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if not self.ln_eps > 0:
            raise ValueError("ln_eps must be positive")
        if self.head_dim is None:
            if self.hidden % self.num_heads:
                raise ValueError(f"hidden={self.hidden} is not divisible by num_heads={self.num_heads}")
            object.__setattr__(self, "head_dim", self.hidden // self.num_heads)
        elif self.head_dim < 1:
            raise ValueError("head_dim must be positive")
        # Stored as f32 in model files; normalise so save/load is lossless.
        object.__setattr__(self, "ln_eps", float(np.float32(self.ln_eps)))

    @property
    def attn_dim(self) -> int:
        return self.num_heads * self.head_dim

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def layer_prefix(layer: int) -> str:
    return f"layers.{layer}"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Closed-form shape of every tensor, in canonical (file) order."""
    h, f, d = config.hidden, config.ffn_size, config.attn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.word": (config.vocab_size, h),
        "embeddings.position": (config.max_seq_len, h),
        "embeddings.ln.gamma": (h,),
        "embeddings.ln.beta": (h,),
    }
    for layer in range(config.num_layers):
        p = layer_prefix(layer)
        for proj in ("q", "k", "v"):
            shapes[f"{p}.attn.{proj}.weight"] = (h, d)
            shapes[f"{p}.attn.{proj}.bias"] = (d,)
        shapes[f"{p}.attn.o.weight"] = (d, h)
        shapes[f"{p}.attn.o.bias"] = (h,)
        shapes[f"{p}.attn.ln.gamma"] = (h,)
        shapes[f"{p}.attn.ln.beta"] = (h,)
        shapes[f"{p}.ffn.in.weight"] = (h, f)
        shapes[f"{p}.ffn.in.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, h)
        shapes[f"{p}.ffn.out.bias"] = (h,)
        shapes[f"{p}.ffn.ln.gamma"] = (h,)
        shapes[f"{p}.ffn.ln.beta"] = (h,)
    shapes["pooler.weight"] = (h, h)
    shapes["pooler.bias"] = (h,)
    shapes["classifier.weight"] = (h, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def constant_matrices(config: ModelConfig) -> list[str]:
    """Names of the weight matrices that feed GEMMs (quantizable in i8 plans)."""
    names = []
    for layer in range(config.num_layers):
        p = layer_prefix(layer)
        names += [f"{p}.attn.{x}.weight" for x in ("q", "k", "v", "o")]
        names += [f"{p}.ffn.in.weight", f"{p}.ffn.out.weight"]
    return names + ["pooler.weight", "classifier.weight"]


_uids = itertools.count()


class Model:
    """Configuration plus named tensors.  Treated as immutable once built."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = dict(params)
        self.audit()
        self.uid = f"m{next(_uids)}"
        self._lock = threading.Lock()
        self._dense: dict[str, np.ndarray] = {}
        uid = self.uid
        weakref.finalize(self, PACK_CACHE.evict, lambda key: isinstance(key, tuple) and key[0] == uid)

    def __repr__(self) -> str:
        return f"Model({self.config})"

    def audit(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        matrices = set(constant_matrices(self.config))
        for name, shape in expected.items():
            value = self.params[name]
            if isinstance(value, QuantizedWeight):
                if name not in matrices:
                    raise ValueError(f"{name} cannot be stored quantized")
                if value.values.shape != shape or value.col_scales.shape != (shape[-1],):
                    raise ValueError(f"{name}: quantized shape {value.values.shape}, expected {shape}")
            elif value.shape != shape:
                raise ValueError(f"{name}: shape {value.shape}, expected {shape}")

    def is_quantized(self) -> bool:
        return any(isinstance(v, QuantizedWeight) for v in self.params.values())

    def dense(self, name: str) -> np.ndarray:
        value = self.params[name]
        if not isinstance(value, QuantizedWeight):
            return value
        with self._lock:
            out = self._dense.get(name)
            if out is None:
                out = self._dense[name] = value.dequantize()
        return out

    def dense_params(self, dtype=np.float32) -> dict[str, np.ndarray]:
        return {name: np.array(self.dense(name), dtype=dtype) for name in self.params}

    def fused_qkv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        p = layer_prefix(layer)
        key = f"{p}.attn.qkv"
        with self._lock:
            hit = self._dense.get(key + ".weight")
        if hit is None:
            w = np.concatenate([self.dense(f"{p}.attn.{x}.weight") for x in "qkv"], axis=1)
            b = np.concatenate([self.params[f"{p}.attn.{x}.bias"] for x in "qkv"])
            with self._lock:
                self._dense[key + ".weight"] = w
                self._dense[key + ".bias"] = b
            return w, b
        with self._lock:
            return hit, self._dense[key + ".bias"]

    def quantized_matrix(self, name: str) -> QuantizedWeight:
        if name.endswith("attn.qkv.weight"):
            layer = int(name.split(".")[1])
            parts = [self.quantized_matrix(f"{layer_prefix(layer)}.attn.{x}.weight") for x in "qkv"]
            # Per-column scales make this identical to quantizing the concatenation.
            return QuantizedWeight(
                np.concatenate([q.values for q in parts], axis=1),
                np.concatenate([q.col_scales for q in parts]),
            )
        value = self.params[name]
        if isinstance(value, QuantizedWeight):
            return value
        return quantize_weight_per_column(value)

    def packed(self, name: str, cache: Optional[PackCache] = None) -> PackedWeight:
        cache = PACK_CACHE if cache is None else cache
        return cache.get_or_pack((self.uid, name), lambda: self.quantized_matrix(name))

    def with_params(self, config: Optional[ModelConfig] = None, **updates: Tensor) -> "Model":
        params = dict(self.params)
        params.update(updates)
        return Model(config or self.config, params)

    def copy(self) -> "Model":
        params = {
            k: (QuantizedWeight(v.values.copy(), v.col_scales.copy()) if isinstance(v, QuantizedWeight) else v.copy())
            for k, v in self.params.items()
        }
        return Model(self.config, params)

    def quantize(self) -> "Model":
        """Return a copy whose constant weight matrices are stored as int8."""
        params = dict(self.params)
        for name in constant_matrices(self.config):
            params[name] = self.quantized_matrix(name)
        return Model(self.config, params)


def init_model(config: ModelConfig, seed: int = 0, std: float = 0.02) -> Model:
    """Seeded initialisation: N(0, std) weights and embeddings, zero biases, unit LN gains."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias") or name.endswith(".beta"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return Model(config, params)


@dataclass(frozen=True)
class ExecPlan:
    precision: str = "f32"
    fused_qkv: bool = False
    fused_attention: bool = False
    fused_epilogue: bool = False

    def __post_init__(self) -> None:
        if self.precision not in ("f32", "i8-dynamic"):
            raise ValueError(f"precision must be 'f32' or 'i8-dynamic', got {self.precision!r}")

    @classmethod
    def optimized(cls, precision: str = "i8-dynamic") -> "ExecPlan":
        return cls(precision, fused_qkv=True, fused_attention=True, fused_epilogue=True)


F32 = ExecPlan()
I8 = ExecPlan("i8-dynamic")


def _linear(model, x, weight, bias, plan, epilogue="none", packed_name=None):
    """One constant-weight GEMM, routed by precision and epilogue fusion."""
    if plan.precision == "f32":
        if plan.fused_epilogue:
            return gemm_f32(x, weight, bias, epilogue)
        out = gemm_f32(x, weight)
        out = out + bias
        return apply_epilogue(out, epilogue)

    aq = quantize_activations_dynamic(x)
    packed = model.packed(packed_name)
    if plan.fused_epilogue and epilogue in ("none", "relu"):
        return gemm_i8(aq, packed, bias, epilogue)
    if plan.fused_epilogue:  # gelu: bias fused, activation separate
        return apply_epilogue(gemm_i8(aq, packed, bias), epilogue)
    out = gemm_i8(aq, packed)
    out = out + bias
    return apply_epilogue(out, epilogue)


def _dense_linear(model, x, name, plan, epilogue="none"):
    return _linear(model, x, model.dense(f"{name}.weight"), model.params[f"{name}.bias"], plan, epilogue, f"{name}.weight")


def _attention_unfused(q, k, v, mask_add, head_mask, b, s, a, d):
    qh = q.reshape(b, s, a, d).transpose(0, 2, 1, 3)
    kh = k.reshape(b, s, a, d).transpose(0, 2, 3, 1)
    vh = v.reshape(b, s, a, d).transpose(0, 2, 1, 3)
    record_macs("attention_scores", b * a * s * s * d)
    scores = np.matmul(qh, kh)
    scores = scores * np.float32(1.0 / math.sqrt(d))
    scores = scores + mask_add[:, None, None, :]
    probs = softmax_rows(scores)
    record_macs("attention_context", b * a * s * s * d)
    ctx = np.matmul(probs, vh)
    if head_mask is not None:
        ctx = ctx * head_mask[None, :, None, None]
    return np.ascontiguousarray(ctx.transpose(0, 2, 1, 3)).reshape(b * s, a * d)


def _check_inputs(config: ModelConfig, ids: np.ndarray, mask: np.ndarray) -> None:
    if ids.ndim != 2 or ids.shape != mask.shape:
        raise InputError(f"ids {ids.shape} and mask {mask.shape} must be matching matrices")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")


def forward(
    model: Model,
    batch,
    plan: ExecPlan = F32,
    head_mask: Optional[Sequence[np.ndarray]] = None,
    ffn_mask: Optional[Sequence[np.ndarray]] = None,
    trace: Optional[dict] = None,
) -> np.ndarray:
    """Logits [B, C] for a padded batch (anything with ``ids`` and ``mask``).

    ``head_mask[l][h]`` scales head h's context output before the output
    projection; ``ffn_mask[l][u]`` scales intermediate unit u after the
    activation.  ``trace`` (if given) receives each layer's pre-projection
    context tensor under ``layers.{l}.context``.
    """
    cfg = model.config
    ids = np.asarray(batch.ids)
    mask = np.asarray(batch.mask)
    _check_inputs(cfg, ids, mask)
    b, s = ids.shape
    h, a, d = cfg.hidden, cfg.num_heads, cfg.head_dim
    dim = a * d
    threads = _backend.kernel_threads()

    x = model.dense("embeddings.word")[ids] + model.dense("embeddings.position")[:s]
    x = x.reshape(b * s, h)
    x = layer_norm(x, model.params["embeddings.ln.gamma"], model.params["embeddings.ln.beta"], cfg.ln_eps)
    mask_add = np.ascontiguousarray((1.0 - mask.astype(np.float32)) * np.float32(PAD_PENALTY), dtype=np.float32)

    for layer in range(cfg.num_layers):
        p = layer_prefix(layer)
        hm = None if head_mask is None else np.ascontiguousarray(head_mask[layer], dtype=np.float32)
        if plan.fused_qkv:
            w, bias = model.fused_qkv(layer)
            qkv = _linear(model, x, w, bias, plan, packed_name=f"{p}.attn.qkv.weight")
            q, k, v = qkv[:, :dim], qkv[:, dim : 2 * dim], qkv[:, 2 * dim :]
        else:
            q = _dense_linear(model, x, f"{p}.attn.q", plan)
            k = _dense_linear(model, x, f"{p}.attn.k", plan)
            v = _dense_linear(model, x, f"{p}.attn.v", plan)
        if plan.fused_attention:
            record_macs("attention_fused", 2 * b * a * s * s * d)
            ctx = _backend.impl.fused_attention(q, k, v, mask_add, hm, b, s, a, d, 1.0 / math.sqrt(d), threads)
        else:
            ctx = _attention_unfused(q, k, v, mask_add, hm, b, s, a, d)
        if trace is not None:
            trace[f"{p}.context"] = ctx
        attn = _dense_linear(model, ctx, f"{p}.attn.o", plan)
        x = layer_norm(x + attn, model.params[f"{p}.attn.ln.gamma"], model.params[f"{p}.attn.ln.beta"], cfg.ln_eps)

        inter = _dense_linear(model, x, f"{p}.ffn.in", plan, cfg.activation)
        if ffn_mask is not None:
            inter = inter * np.asarray(ffn_mask[layer], dtype=np.float32)
        out = _dense_linear(model, inter, f"{p}.ffn.out", plan)
        x = layer_norm(x + out, model.params[f"{p}.ffn.ln.gamma"], model.params[f"{p}.ffn.ln.beta"], cfg.ln_eps)

    first = np.ascontiguousarray(x.reshape(b, s, h)[:, 0, :])
    pooled = np.tanh(_dense_linear(model, first, "pooler", plan))
    return _dense_linear(model, pooled, "classifier", plan)


def swap_activation(model: Model, to: str = "relu") -> Model:
    """Switch the FFN activation without touching any tensor.

    Accuracy usually drops until the model is distilled again.  Swapping to
    the activation the model already uses is a no-op and warns.
    """
    if to not in ACTIVATIONS:
        raise ValueError(f"unknown activation {to!r}")
    if model.config.activation == to:
        warnings.warn(f"model already uses {to}; nothing swapped", stacklevel=2)
        return model
    return Model(model.config.replace(activation=to), model.params)


@dataclass
class FidelityReport:
    cosine: np.ndarray  # one entry per example
    agree: np.ndarray  # bool per example

    @property
    def agreement(self) -> float:
        return float(self.agree.mean()) if len(self.agree) else float("nan")

    @property
    def rows(self) -> int:
        return len(self.cosine)


def compare_plans(
    model: Model,
    sequences: Iterable[Sequence[int]],
    plan_a: ExecPlan = F32,
    plan_b: ExecPlan = I8,
) -> FidelityReport:
    """Per-example cosine similarity and argmax agreement between two plans.

    Examples run one at a time (batch size 1), so per-tensor activation
    ranges are the example's own.
    """
    from slimformer.runtime import Batch

    cos, agree = [], []
    for seq in sequences:
        batch = Batch.from_sequences([seq])
        la = forward(model, batch, plan_a)[0].astype(np.float64)
        lb = forward(model, batch, plan_b)[0].astype(np.float64)
        denom = np.linalg.norm(la) * np.linalg.norm(lb)
        cos.append(float(la @ lb / denom) if denom > 0 else float(np.array_equal(la, lb)))
        agree.append(int(np.argmax(la)) == int(np.argmax(lb)))
    if not cos:
        raise ValueError("dataset is empty")
    return FidelityReport(np.asarray(cos), np.asarray(agree, dtype=bool))


forward_fp32_vs_i8_report = compare_plans
