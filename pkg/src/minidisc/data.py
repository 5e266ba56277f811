"""Integer-token classification datasets and batch iteration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Batch


@dataclass
class Dataset:
    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.lengths.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("ids, lengths and labels disagree on example count")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.ids[idx], self.lengths[idx], self.labels[idx])

    def batch(self, idx) -> tuple[Batch, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self.ids[idx], self.lengths[idx]), self.labels[idx]

    def fixed_batches(self, n_batches: int, batch_size: int, seed: int = 0):
        """``n_batches`` disjoint batches drawn once from a seeded permutation."""
        if len(self) == 0:
            raise ValueError("empty dataset")
        perm = np.random.default_rng(seed).permutation(len(self))
        out = []
        for b in range(n_batches):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            if len(idx) == 0:
                break
            out.append(self.batch(idx))
        return out


@dataclass
class TaskData:
    train: Dataset
    dev: Dataset
    name: str = "task"
    n_classes: int = 2


class BatchSampler:
    """Endless shuffled minibatch indices; reshuffles every epoch."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._perm = self.rng.permutation(n)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx
