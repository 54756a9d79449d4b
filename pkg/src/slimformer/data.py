"""Token-id datasets and a synthetic separable classification task."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

CLS_ID = 1


@dataclass
class Dataset:
    sequences: list[np.ndarray]
    labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.sequences):
                raise ValueError("labels and sequences differ in length")

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        labels = None if self.labels is None else self.labels[np.asarray(idx, dtype=np.int64)]
        return Dataset([self.sequences[i] for i in idx], labels)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))

    def lengths(self) -> np.ndarray:
        return np.array([len(s) for s in self.sequences], dtype=np.int64)


def toy_task(
    n: int,
    vocab_size: int = 32,
    num_classes: int = 2,
    min_len: int = 6,
    max_len: int = 16,
    seed: int = 0,
) -> Dataset:
    """Separable task: a leading CLS token, shared noise tokens, and one to
    three "signal" tokens drawn from a vocabulary slice owned by the label.

    Token 0 is padding and never appears.  The upper half of the vocabulary
    is split evenly between the classes as signal tokens; the rest is noise.
    """
    if vocab_size < 2 + 2 * num_classes:
        raise ValueError("vocabulary too small for the requested classes")
    if min_len < 2:
        raise ValueError("min_len must leave room for CLS and one signal token")
    rng = np.random.default_rng(seed)
    noise_hi = 2 + (vocab_size - 2) // 2
    per_class = (vocab_size - noise_hi) // num_classes
    seqs, labels = [], []
    for _ in range(n):
        label = int(rng.integers(num_classes))
        length = int(rng.integers(min_len, max_len + 1))
        seq = rng.integers(2, noise_hi, size=length)
        seq[0] = CLS_ID
        k = int(rng.integers(1, min(3, length - 1) + 1))
        pos = rng.choice(np.arange(1, length), size=k, replace=False)
        lo = noise_hi + label * per_class
        seq[pos] = rng.integers(lo, lo + per_class, size=k)
        seqs.append(seq)
        labels.append(label)
    return Dataset(seqs, np.asarray(labels))


def random_corpus(n: int, vocab_size: int, min_len: int, max_len: int, seed: int = 0) -> list[np.ndarray]:
    """Unlabelled sequences with lengths uniform in [min_len, max_len]."""
    rng = np.random.default_rng(seed)
    return [rng.integers(1, vocab_size, size=int(rng.integers(min_len, max_len + 1))) for _ in range(n)]
