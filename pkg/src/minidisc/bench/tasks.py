"""Synthetic sequence-classification tasks with closed-form labels.

Token conventions: position 0 holds ``CLS = vocab - 1``; pair tasks separate
their halves with ``SEP = vocab - 2``; entries past an example's length are 0
and masked out by the model.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..data import Dataset, TaskData

KINDS = ("parity-of-marked-tokens", "majority-class", "pair-similarity")
MARKED = 1


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "majority-class"
    vocab: int = 64
    length: int = 32
    n_classes: int = 2
    n_train: int = 2048
    n_dev: int = 512
    seed: int = 0
    max_marked: int = 6
    min_length: int | None = None  # shortest sequence; defaults to half of ``length``

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.vocab < 4:
            raise ValueError("vocab must be >= 4")
        if self.length < 4:
            raise ValueError("length must be >= 4")
        if self.min_length is not None and not 2 <= self.min_length <= self.length:
            raise ValueError("min_length must lie between 2 and length")
        if self.kind != "majority-class" and self.n_classes != 2:
            raise ValueError(f"{self.kind} is a binary task")
        if self.kind == "majority-class" and (self.vocab - 3) < 2 * self.n_classes:
            raise ValueError("vocab too small for the requested number of classes")

    @property
    def cls_id(self) -> int:
        return self.vocab - 1

    @property
    def sep_id(self) -> int:
        return self.vocab - 2

    @property
    def shortest(self) -> int:
        return self.length // 2 if self.min_length is None else self.min_length

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def name(self) -> str:
        return self.kind


def _balanced_labels(n: int, n_classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % n_classes)


def _parity(spec: TaskSpec, n: int, rng):
    ids = np.zeros((n, spec.length), dtype=np.int64)
    lengths = rng.integers(spec.shortest, spec.length + 1, size=n)
    labels = _balanced_labels(n, 2, rng)
    plain = np.arange(2, spec.vocab - 2)  # everything but PAD/marked/SEP/CLS
    for i in range(n):
        L = lengths[i]
        ids[i, 0] = spec.cls_id
        ids[i, 1:L] = rng.choice(plain, size=L - 1)
        top = min(spec.max_marked, L - 1)
        counts = [c for c in range(top + 1) if c % 2 == labels[i]]
        c = rng.choice(counts)
        pos = rng.choice(np.arange(1, L), size=c, replace=False)
        ids[i, pos] = MARKED
    return ids, lengths, labels


def class_groups(spec: TaskSpec) -> list[np.ndarray]:
    """Disjoint token groups, one per class, carved from the content ids."""
    content = np.arange(1, spec.vocab - 2)
    per = len(content) // spec.n_classes
    return [content[c * per:(c + 1) * per] for c in range(spec.n_classes)]


def _majority(spec: TaskSpec, n: int, rng):
    groups = class_groups(spec)
    ids = np.zeros((n, spec.length), dtype=np.int64)
    lengths = rng.integers(spec.shortest, spec.length + 1, size=n)
    labels = _balanced_labels(n, spec.n_classes, rng)
    for i in range(n):
        L = lengths[i] - 1
        # a winning class with a strict plurality, margin one to three tokens
        while True:
            counts = rng.multinomial(L, np.full(spec.n_classes, 1.0 / spec.n_classes))
            order = np.argsort(-counts, kind="stable")
            if counts[order[0]] > counts[order[1]]:
                break
        # rotate so that the winning class is the requested label
        counts = np.roll(counts, labels[i] - order[0])
        toks = np.concatenate([rng.choice(groups[c], size=k) for c, k in enumerate(counts)])
        ids[i, 0] = spec.cls_id
        ids[i, 1:L + 1] = rng.permutation(toks)
    return ids, lengths, labels


def _pair(spec: TaskSpec, n: int, rng):
    half = (spec.length - 2) // 2
    ids = np.zeros((n, spec.length), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    labels = _balanced_labels(n, 2, rng)
    content = np.arange(1, spec.vocab - 2)
    for i in range(n):
        k = rng.integers(max(2, half // 2), half + 1)
        a = rng.choice(content, size=k, replace=False)
        b = a.copy()
        if labels[i] == 0:
            # negatives replace between half and all of the tokens
            n_sub = rng.integers(max(1, k // 2), k + 1)
            where = rng.choice(k, size=n_sub, replace=False)
            others = np.setdiff1d(content, a)
            b[where] = rng.choice(others, size=n_sub, replace=False)
        b = rng.permutation(b)
        seq = np.concatenate([[spec.cls_id], a, [spec.sep_id], b])
        ids[i, :len(seq)] = seq
        lengths[i] = len(seq)
    return ids, lengths, labels


def label_of(spec: TaskSpec, ids: np.ndarray, length: int) -> int:
    """Closed-form labeler for one example (reference implementation)."""
    seq = ids[:length]
    if spec.kind == "parity-of-marked-tokens":
        return int((seq == MARKED).sum() % 2)
    if spec.kind == "majority-class":
        groups = class_groups(spec)
        counts = [np.isin(seq, g).sum() for g in groups]
        return int(np.argmax(counts))
    sep = int(np.flatnonzero(seq == spec.sep_id)[0])
    return int(sorted(seq[1:sep].tolist()) == sorted(seq[sep + 1:].tolist()))


_GENERATORS = {"parity-of-marked-tokens": _parity, "majority-class": _majority,
               "pair-similarity": _pair}


def _dedupe_against(ids, lengths, labels, seen: set):
    keep = []
    for i in range(len(ids)):
        key = ids[i, :lengths[i]].tobytes()
        if key not in seen:
            keep.append(i)
    return np.asarray(keep, dtype=np.int64)


def make_task(spec: TaskSpec) -> TaskData:
    """Deterministic train/dev split; dev never repeats a training sequence."""
    rng = np.random.default_rng(spec.seed)
    gen = _GENERATORS[spec.kind]
    train = Dataset(*gen(spec, spec.n_train, rng))
    seen = {train.ids[i, :train.lengths[i]].tobytes() for i in range(len(train))}
    dev_parts, total = [], 0
    while total < spec.n_dev:
        ids, lengths, labels = gen(spec, spec.n_dev, rng)
        keep = _dedupe_against(ids, lengths, labels, seen)
        dev_parts.append((ids[keep], lengths[keep], labels[keep]))
        total += len(keep)
    ids = np.concatenate([p[0] for p in dev_parts])[:spec.n_dev]
    lengths = np.concatenate([p[1] for p in dev_parts])[:spec.n_dev]
    labels = np.concatenate([p[2] for p in dev_parts])[:spec.n_dev]
    return TaskData(train=train, dev=Dataset(ids, lengths, labels), name=spec.kind,
                    n_classes=spec.n_classes)
