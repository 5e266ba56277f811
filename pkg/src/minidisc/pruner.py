"""Gradient-based structured pruning and nested candidate grids.

Importance of a head or neuron is the mean absolute gradient of the task loss
with respect to its gate, with every gate held at one. Scores are l2-normalized
within each (layer, type) group and ranked; every candidate structure is cut
from that single ranking, so smaller candidates are always subsets of larger
ones.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, SharedParamStore, StructureMask, forward, scale_of
from .tensor import Tensor

TYPES = ("self_head", "cross_head", "ffn_neuron")


class DegenerateScaleError(ValueError):
    pass


@dataclass
class ImportanceTable:
    """Scores per structure type, each an array shaped (layers, count)."""

    raw: dict[str, np.ndarray]
    normalized: dict[str, np.ndarray] | None = None
    order: dict[str, np.ndarray] | None = None  # (k, 2) rows of (layer, index), least important first
    mode: str | None = None

    @property
    def types(self) -> list[str]:
        return [t for t in TYPES if t in self.raw]

    def ranks(self, kind: str) -> np.ndarray:
        """Position of each structure in the prune order."""
        if self.order is None:
            raise ValueError("table has not been ranked")
        out = np.empty(self.raw[kind].shape, dtype=np.int64)
        o = self.order[kind]
        out[o[:, 0], o[:, 1]] = np.arange(len(o))
        return out

    def to_json(self) -> dict:
        d = {"mode": self.mode, "raw": {k: v.tolist() for k, v in self.raw.items()}}
        if self.normalized is not None:
            d["normalized"] = {k: v.tolist() for k, v in self.normalized.items()}
        if self.order is not None:
            d["order"] = {k: v.tolist() for k, v in self.order.items()}
            d["rank"] = {k: self.ranks(k).tolist() for k in self.order}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ImportanceTable":
        def arrs(key, dtype=float):
            if key not in d:
                return None
            return {k: np.asarray(v, dtype=dtype) for k, v in d[key].items()}

        order = arrs("order", np.int64)
        if order is not None:
            order = {k: v.reshape(-1, 2) for k, v in order.items()}
        return cls(raw=arrs("raw"), normalized=arrs("normalized"), order=order, mode=d.get("mode"))


@contextlib.contextmanager
def _weights_frozen(store: SharedParamStore):
    flags = {k: p.requires_grad for k, p in store.items()}
    for p in store.tensors():
        p.requires_grad = False
    try:
        yield
    finally:
        for k, p in store.items():
            p.requires_grad = flags[k]


def importance_scores(store: SharedParamStore, batches, loss_kind: str = "ce") -> ImportanceTable:
    """Mean over ``batches`` of |dL/d gate| for every head and neuron.

    ``batches`` is a sequence of ``(Batch, labels)``. Weights are not modified.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("importance_scores needs at least one batch")
    if loss_kind != "ce":
        raise ValueError(f"unsupported loss kind {loss_kind!r}")
    cfg = store.config
    dtype = store["tok_emb"].dtype
    mask = StructureMask.ones(cfg)
    head_acc = np.zeros((cfg.layers, cfg.heads))
    neuron_acc = np.zeros((cfg.layers, cfg.d_ffn))
    with _weights_frozen(store):
        for batch, labels in batches:
            gates = {
                "heads": [Tensor(np.ones(cfg.heads, dtype=dtype), requires_grad=True)
                          for _ in range(cfg.layers)],
                "neurons": [Tensor(np.ones(cfg.d_ffn, dtype=dtype), requires_grad=True)
                            for _ in range(cfg.layers)],
            }
            out = forward(store, mask, batch, mode="dense", gates=gates)
            T.backward(T.loss_ce(out.logits, labels))
            for l in range(cfg.layers):
                head_acc[l] += np.abs(gates["heads"][l].grad)
                neuron_acc[l] += np.abs(gates["neurons"][l].grad)
    raw = {"self_head": head_acc / len(batches), "ffn_neuron": neuron_acc / len(batches)}
    if cfg.with_cross_attention:
        # no encoder-decoder stack is built, so cross heads carry no signal
        raw["cross_head"] = np.zeros((cfg.layers, cfg.heads))
    return ImportanceTable(raw=raw)


def normalize_scores(table: ImportanceTable) -> ImportanceTable:
    """Divide each (layer, type) group by its l2 norm; all-zero groups stay zero."""
    normed = {}
    for kind, s in table.raw.items():
        s = np.asarray(s, dtype=np.float64)
        norm = np.sqrt((s * s).sum(axis=1, keepdims=True))
        normed[kind] = np.divide(s, norm, out=np.zeros_like(s), where=norm > 0)
    return ImportanceTable(raw=table.raw, normalized=normed, order=None, mode=None)


def rank(table: ImportanceTable, mode: str = "global") -> ImportanceTable:
    """Prune order per type, least important first.

    ``global`` sorts every structure of a type across layers. ``local`` sorts
    within each layer and interleaves layers round-robin. Ties go to the lower
    layer, then the lower index.
    """
    if table.normalized is None:
        raise ValueError("normalize_scores must run before rank")
    order = {}
    for kind, s in table.normalized.items():
        L, n = s.shape
        layer_idx, struct_idx = np.meshgrid(np.arange(L), np.arange(n), indexing="ij")
        if mode == "global":
            perm = np.lexsort((struct_idx.ravel(), layer_idx.ravel(), s.ravel()))
            order[kind] = np.stack([layer_idx.ravel()[perm], struct_idx.ravel()[perm]], axis=1)
        elif mode == "local":
            per_layer = [np.lexsort((np.arange(n), s[l])) for l in range(L)]
            rows = [(l, per_layer[l][r]) for r in range(n) for l in range(L)]
            order[kind] = np.asarray(rows, dtype=np.int64).reshape(-1, 2)
        else:
            raise ValueError(f"unknown ranking mode {mode!r}")
    return ImportanceTable(raw=table.raw, normalized=table.normalized, order=order, mode=mode)


def kept_count(total: int, target: float) -> int:
    """Largest kept count whose fraction does not exceed ``target``."""
    return int(math.floor(total * target + 1e-9))


def structure_at_scale(ranked: ImportanceTable, config: ModelConfig, target: float) -> StructureMask:
    """Prune each structure type separately down to ``target`` of its parameters."""
    if not 0 < target <= 1:
        raise ValueError(f"target scale must lie in (0, 1], got {target}")
    if ranked.order is None:
        raise ValueError("structure_at_scale needs a ranked table")
    bits = {}
    for kind in ranked.types:
        L, n = ranked.raw[kind].shape
        keep = np.ones((L, n), dtype=bool)
        order = ranked.order[kind]
        n_pruned = len(order) - kept_count(len(order), target)
        drop = order[:n_pruned]
        keep[drop[:, 0], drop[:, 1]] = False
        bits[kind] = keep
    if not bits["self_head"].any() and not bits["ffn_neuron"].any():
        raise DegenerateScaleError(f"degenerate scale: nothing survives at target {target}")
    mask = StructureMask(bits["self_head"], bits["ffn_neuron"], bits.get("cross_head"))
    mask.check(config)
    return mask


def pruned_structures(mask: StructureMask) -> dict:
    """Per-layer surviving heads and neurons (structure distribution)."""
    return {
        "heads": mask.self_heads.sum(axis=1).astype(int).tolist(),
        "neurons": mask.ffn_neurons.sum(axis=1).astype(int).tolist(),
        "heads_total": int(mask.self_heads.shape[1]),
        "neurons_total": int(mask.ffn_neurons.shape[1]),
    }


@dataclass
class GridEntry:
    target_scale: float
    achieved_scale: float
    mask: StructureMask


@dataclass
class CandidateGrid:
    n: int
    delta: float
    student_scale: float
    teacher_scale: float
    entries: list[GridEntry]
    table: ImportanceTable | None = field(default=None, repr=False)

    @property
    def target_scales(self) -> list[float]:
        return [e.target_scale for e in self.entries]

    @property
    def achieved_scales(self) -> list[float]:
        return [e.achieved_scale for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i) -> GridEntry:
        return self.entries[i]

    def is_nested(self) -> bool:
        return all(self.entries[i].mask.issubset(self.entries[j].mask)
                   for i in range(len(self)) for j in range(i + 1, len(self)))

    def to_json(self) -> dict:
        return {
            "n": self.n, "delta": self.delta, "student_scale": self.student_scale,
            "teacher_scale": self.teacher_scale,
            "entries": [{"target_scale": e.target_scale, "achieved_scale": e.achieved_scale,
                         "mask": e.mask.to_json()} for e in self.entries],
            "importance": self.table.to_json() if self.table is not None else None,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CandidateGrid":
        table = ImportanceTable.from_json(d["importance"]) if d.get("importance") else None
        return cls(
            n=d["n"], delta=d["delta"], student_scale=d["student_scale"],
            teacher_scale=d["teacher_scale"], table=table,
            entries=[GridEntry(e["target_scale"], e["achieved_scale"],
                               StructureMask.from_json(e["mask"])) for e in d["entries"]],
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "CandidateGrid":
        with open(path) as f:
            return cls.from_json(json.load(f))


def grid_scales(s_s: float, n: int, s_t: float = 1.0) -> tuple[list[float], float]:
    """Targets ``s_s + k * delta`` for k = 0..n-1 with delta = (s_t - s_s) / n."""
    if not 0 < s_s < s_t <= 1:
        raise ValueError(f"need 0 < student scale < teacher scale <= 1, got {s_s}, {s_t}")
    if n < 2:
        raise ValueError("grid count n must be >= 2")
    delta = (s_t - s_s) / n
    return [round(s_s + k * delta, 12) for k in range(n)], delta


def grid_from_table(ranked: ImportanceTable, config: ModelConfig, s_s: float, n: int,
                    s_t: float = 1.0) -> CandidateGrid:
    targets, delta = grid_scales(s_s, n, s_t)
    entries = []
    for t in targets:
        m = structure_at_scale(ranked, config, t)
        entries.append(GridEntry(t, scale_of(config, m), m))
    grid = CandidateGrid(n=n, delta=delta, student_scale=s_s, teacher_scale=s_t,
                         entries=entries, table=ranked)
    if not grid.is_nested():
        raise AssertionError("candidate grid violates nesting")
    return grid


def build_grid(store: SharedParamStore, data, config: ModelConfig, s_s: float, n: int,
               s_t: float = 1.0, rank_mode: str = "global", n_batches: int = 8,
               batch_size: int = 32, seed: int = 0) -> CandidateGrid:
    """Score the teacher once, then cut one nested mask per grid scale.

    ``data`` is a Dataset (scored on ``n_batches`` fixed batches) or an explicit
    list of ``(Batch, labels)``.
    """
    grid_scales(s_s, n, s_t)
    batches = data.fixed_batches(n_batches, batch_size, seed) if hasattr(data, "fixed_batches") else data
    table = rank(normalize_scores(importance_scores(store, batches)), rank_mode)
    return grid_from_table(table, config, s_s, n, s_t)
