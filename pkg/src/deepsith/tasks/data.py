"""In-memory datasets, seeded batching, and a plain-text export."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

__all__ = ["SequenceDataset", "BatchIterator", "split_and_batch", "train_val_split", "export_columns"]


@dataclass(eq=False)
class SequenceDataset:
    inputs: np.ndarray  # (n, T, F)
    targets: np.ndarray  # (n,) labels, (n,) scalars or (n, T) series

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets must have the same length")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "SequenceDataset":
        return SequenceDataset(self.inputs[idx], self.targets[idx])


def train_val_split(ds: SequenceDataset, train_fraction: float, seed: int) -> tuple[SequenceDataset, SequenceDataset]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(len(ds))
    cut = int(round(train_fraction * len(ds)))
    return ds.subset(np.sort(order[:cut])), ds.subset(np.sort(order[cut:]))


class BatchIterator:
    """Shuffled mini-batches; the order for epoch ``e`` depends only on ``(seed, e)``."""

    def __init__(self, ds: SequenceDataset, batch_size: int, seed: int, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if len(ds) == 0:
            raise ValueError("cannot batch an empty dataset")
        self.ds = ds
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle

    def __len__(self) -> int:
        return -(-len(self.ds) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.ds))
        return np.random.default_rng((self.seed, epoch)).permutation(len(self.ds))

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = self.order(epoch)
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.ds.inputs[idx], self.ds.targets[idx]


def split_and_batch(ds: SequenceDataset, batch_size: int, seed: int, shuffle: bool = True) -> BatchIterator:
    return BatchIterator(ds, batch_size, seed, shuffle)


def export_columns(path: str | Path, ds: SequenceDataset) -> None:
    """Write a dataset as whitespace-separated columns, one row per (sample, t).

    Columns: ``sample t x0 .. x{F-1} target``. For per-sample targets the value
    is repeated on every row of the sample; for series targets it is the
    target at ``t``.
    """
    n, T, F = ds.inputs.shape
    header = ["sample", "t"] + [f"x{j}" for j in range(F)] + ["target"]
    targets = np.asarray(ds.targets)
    with open(path, "w") as fh:
        fh.write(" ".join(header) + "\n")
        for i in range(n):
            for t in range(T):
                tgt = (targets[i, t] if targets.ndim == 2 else targets[i]).item()
                vals = " ".join(repr(float(v)) for v in ds.inputs[i, t])
                fh.write(f"{i} {t} {vals} {tgt!r}\n")
