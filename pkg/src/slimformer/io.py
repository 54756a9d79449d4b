"""Binary model files and JSON-lines datasets.

Model file layout (all integers and floats little-endian)::

    b"FFM1"  u32 version (=1)
    config:  u32 layers, hidden, heads, ffn, vocab, max_seq_len, classes
             u8 activation (0 = gelu, 1 = relu)   f32 ln_eps
    u32 tensor count, then per tensor:
             u16 name length, UTF-8 name, u8 dtype (0 = f32, 1 = i8),
             u8 rank, u32 dims[rank], raw payload (row-major);
             i8 tensors are followed by f32 col_scales[dims[-1]]

Head width is not stored; it is recovered from the first query projection
(columns / heads), which is what lets pruned models round-trip.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from slimformer.data import Dataset
from slimformer.encoder import ACTIVATIONS, Model, ModelConfig, param_shapes
from slimformer.qgemm import QuantizedWeight

MAGIC = b"FFM1"
VERSION = 1
DTYPE_F32, DTYPE_I8 = 0, 1

PathLike = Union[str, Path]


class FormatError(ValueError):
    """A model or dataset file is malformed or inconsistent."""


def dumps_model(model: Model) -> bytes:
    cfg = model.config
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack(
        "<7IBf",
        cfg.num_layers, cfg.hidden, cfg.num_heads, cfg.ffn_size,
        cfg.vocab_size, cfg.max_seq_len, cfg.num_classes,
        ACTIVATIONS.index(cfg.activation), cfg.ln_eps,
    )
    names = list(param_shapes(cfg))
    out += struct.pack("<I", len(names))
    for name in names:
        value = model.params[name]
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        if isinstance(value, QuantizedWeight):
            arr, tag = value.values, DTYPE_I8
        else:
            arr, tag = value, DTYPE_F32
        out += struct.pack("<BB", tag, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        if tag == DTYPE_I8:
            out += np.ascontiguousarray(arr, dtype="i1").tobytes()
            out += np.ascontiguousarray(value.col_scales, dtype="<f4").tobytes()
        else:
            out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("unexpected end of model file")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_model(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    layers, hidden, heads, ffn, vocab, max_len, classes, act, eps = r.unpack("<7IBf")
    if act >= len(ACTIVATIONS):
        raise FormatError(f"unknown activation code {act}")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        if tag == DTYPE_F32:
            params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        elif tag == DTYPE_I8:
            values = np.frombuffer(r.take(size), dtype="i1").reshape(dims).copy()
            scales = np.frombuffer(r.take(4 * dims[-1]), dtype="<f4").astype(np.float32)
            params[name] = QuantizedWeight(values, scales)
        else:
            raise FormatError(f"{name}: unknown dtype code {tag}")
    if r.pos != len(data):
        raise FormatError("trailing bytes after tensor table")
    q = params.get("layers.0.attn.q.weight")
    q_cols = (q.values if isinstance(q, QuantizedWeight) else q).shape[1] if q is not None else hidden
    if q_cols % heads:
        raise FormatError(f"query projection width {q_cols} is not a multiple of {heads} heads")
    try:
        config = ModelConfig(layers, hidden, heads, ffn, vocab, max_len, classes,
                             ACTIVATIONS[act], float(eps), head_dim=q_cols // heads)
        return Model(config, params)
    except ValueError as exc:
        raise FormatError(f"model file fails the shape audit: {exc}") from exc


def save_model(model: Model, path: PathLike) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path: PathLike) -> Model:
    return loads_model(Path(path).read_bytes())


def load_dataset(path: PathLike, vocab_size: int | None = None, num_classes: int | None = None) -> Dataset:
    """Read ``{"tokens": [...], "label": n}`` records, one per line.

    Errors name the 1-based line number.  Labels are optional as a whole:
    either every record has one or none does.
    """
    seqs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens = rec["tokens"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"line {lineno}: malformed record ({exc})") from None
            if not isinstance(tokens, list) or not tokens or not all(isinstance(t, int) and t >= 0 for t in tokens):
                raise FormatError(f"line {lineno}: tokens must be a non-empty list of non-negative integers")
            if vocab_size is not None and max(tokens) >= vocab_size:
                raise FormatError(f"line {lineno}: token {max(tokens)} >= vocabulary size {vocab_size}")
            label = rec.get("label")
            if label is not None:
                if not isinstance(label, int) or label < 0:
                    raise FormatError(f"line {lineno}: label must be a non-negative integer")
                if num_classes is not None and label >= num_classes:
                    raise FormatError(f"line {lineno}: label {label} >= class count {num_classes}")
            seqs.append(tokens)
            labels.append(label)
    have = [lab is not None for lab in labels]
    if any(have) and not all(have):
        raise FormatError("either every record or no record may carry a label")
    return Dataset(seqs, np.asarray(labels, dtype=np.int64) if labels and all(have) else None)


def save_dataset(dataset: Dataset, path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, seq in enumerate(dataset.sequences):
            rec = {"tokens": [int(t) for t in seq]}
            if dataset.labels is not None:
                rec["label"] = int(dataset.labels[i])
            fh.write(json.dumps(rec) + "\n")
