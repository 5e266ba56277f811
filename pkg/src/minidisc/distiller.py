"""Distillation objectives, single-path distillation and sandwich training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchSampler, Dataset, TaskData
from .ledger import TrialLedger
from .model import (Batch, ModelOutputs, SharedParamStore, StructureMask, forward, predict,
                    visible_params)
from .optim import AdamW
from .pruner import CandidateGrid
from .tensor import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("tsd", "tad", "ce")


class DistillError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class DistillConfig:
    objective: str = "tsd"
    relation_heads: int = 8
    eta: int = 6
    steps: int = 1000
    sandwich_steps: int = 2000
    residual_steps: int = 0
    lr: float = 1e-3
    warmup: float = 0.1
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 0  # 0: five evaluations per run

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.objective == "tad" and self.relation_heads < 1:
            raise ValueError("relation_heads must be >= 1 for TAD")
        for name in ("steps", "sandwich_steps", "residual_steps", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalRecord:
    index: int
    target_scale: float
    achieved_scale: float
    metric: float

    @property
    def scale(self) -> float:
        return self.achieved_scale


@dataclass
class DistillResult:
    metric: float
    initial_metric: float
    best_step: int
    history: list[tuple[int, float]] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


@dataclass
class Model:
    """A network: a store viewed through a mask."""

    store: SharedParamStore
    mask: StructureMask


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def tsd_loss(teacher_out: ModelOutputs, student_out: ModelOutputs) -> Tensor:
    """Soft-target cross entropy on logits plus MSE on the last hidden states."""
    if teacher_out.logits.shape != student_out.logits.shape:
        raise T.ShapeError(f"logit shapes differ: {teacher_out.logits.shape} vs {student_out.logits.shape}")
    if teacher_out.hidden.shape != student_out.hidden.shape:
        raise T.ShapeError(f"hidden shapes differ: {teacher_out.hidden.shape} vs {student_out.hidden.shape}")
    target = _softmax_np(teacher_out.logits.data.astype(np.float64))
    ce = T.loss_soft_ce(student_out.logits, target)
    keep = student_out.valid[..., None].astype(student_out.hidden.dtype)
    h_t = teacher_out.hidden.data * keep
    mse = T.loss_mse(student_out.hidden * Tensor(keep), Tensor(h_t))
    return ce + mse


def tad_loss(teacher_out: ModelOutputs, student_out: ModelOutputs) -> Tensor:
    """Sum over Q/K/V of KL(teacher relation || student relation).

    Each KL is averaged over relation heads, batch and valid query positions.
    """
    if teacher_out.relations is None or student_out.relations is None:
        raise ValueError("tad_loss needs relation matrices on both sides")
    total = None
    for key in ("q", "k", "v"):
        rt, rs = teacher_out.relations[key], student_out.relations[key]
        if rt.shape != rs.shape:
            raise T.ShapeError(f"relation {key} shapes differ: {rt.shape} vs {rs.shape}")
        w = np.broadcast_to(student_out.valid[None], rs.shape[:-1])
        term = T.loss_kl(rt.data, rs, row_weight=w)
        total = term if total is None else total + term
    return total


def objective_loss(kind: str, teacher_out: ModelOutputs | None, student_out: ModelOutputs,
                   labels=None) -> Tensor:
    if kind == "tsd":
        return tsd_loss(teacher_out, student_out)
    if kind == "tad":
        return tad_loss(teacher_out, student_out)
    if kind == "ce":
        return T.loss_ce(student_out.logits, labels)
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def accuracy(store: SharedParamStore, mask: StructureMask, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    logits = predict(store, mask, data.ids, data.lengths)
    return float((logits.argmax(axis=1) == data.labels).mean())


def evaluate_candidates(shared: SharedParamStore, grid: CandidateGrid, devset: Dataset) -> list[EvalRecord]:
    """Dev accuracy of every grid entry read straight off the shared weights."""
    if len(devset) == 0:
        raise ValueError("empty dev set")
    return [EvalRecord(i, e.target_scale, e.achieved_scale, accuracy(shared, e.mask, devset))
            for i, e in enumerate(grid.entries)]


# ---------------------------------------------------------------------------
# teacher targets
# ---------------------------------------------------------------------------

class TeacherTargets:
    """Frozen teacher outputs for training examples.

    For logit/hidden objectives the whole training set is run once and cached;
    examples are independent under padding masks, so a cached row equals what a
    fresh forward on any batch containing it would give. Relation objectives
    are recomputed per batch to keep memory bounded.
    """

    def __init__(self, teacher: Model, train: Dataset, objective: str, relation_heads: int):
        self.teacher = teacher
        self.train = train
        self.objective = objective
        self.relation_heads = relation_heads
        self._logits = self._hidden = None
        if objective == "tsd":
            self._fill()

    def matches(self, teacher: Model, train: Dataset, objective: str) -> bool:
        return (self.teacher.store is teacher.store and self.teacher.mask.equals(teacher.mask)
                and self.train is train and self.objective == objective)

    def _fill(self, chunk: int = 256) -> None:
        logits, hidden = [], []
        with T.no_grad():
            for s in range(0, len(self.train), chunk):
                b = Batch(self.train.ids[s:s + chunk], self.train.lengths[s:s + chunk])
                o = forward(self.teacher.store, self.teacher.mask, b)
                logits.append(o.logits.data)
                hidden.append(o.hidden.data)
        self._logits = np.concatenate(logits)
        self._hidden = np.concatenate(hidden)

    def get(self, idx: np.ndarray) -> ModelOutputs | None:
        if self.objective == "ce":
            return None
        batch = Batch(self.train.ids[idx], self.train.lengths[idx])
        if self._logits is not None:
            return ModelOutputs(Tensor(self._logits[idx]), Tensor(self._hidden[idx]), batch.valid)
        with T.no_grad():
            return forward(self.teacher.store, self.teacher.mask, batch,
                           want_relations=self.objective == "tad",
                           relation_heads=self.relation_heads)


def _check_finite(loss: Tensor, step: int, where: str) -> float:
    value = float(loss.data)
    if not math.isfinite(value):
        raise DistillError(f"{where}: non-finite loss {value} at step {step}")
    return value


def _eval_steps(steps: int, eval_every: int) -> set[int]:
    if steps == 0:
        return set()
    every = eval_every or max(1, steps // 5)
    return set(range(every, steps + 1, every)) | {steps}


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def distill(teacher: Model | None, student: Model, data: TaskData, cfg: DistillConfig,
            ledger: TrialLedger | None = None, phase: str = "student_distill",
            steps: int | None = None, objective: str | None = None,
            targets: "TeacherTargets | None" = None) -> DistillResult:
    """Train ``student`` against ``teacher`` and keep the best dev checkpoint.

    Only entries of the student store visible under the student mask are
    updated. With ``objective="ce"`` the teacher is ignored and labels are used.
    The student store is left holding the best checkpoint. ``targets`` may hold
    precomputed outputs of ``teacher`` to share across several runs.
    """
    steps = cfg.steps if steps is None else steps
    objective = objective or cfg.objective
    if objective != "ce" and teacher is None:
        raise ValueError("distillation needs a teacher")
    store, mask = student.store, student.mask
    if teacher is not None and teacher.store is store:
        raise ValueError("student must not share its store with the teacher; copy it first")
    initial = accuracy(store, mask, data.dev)
    result = DistillResult(metric=initial, initial_metric=initial, best_step=0,
                           history=[(0, initial)])
    if ledger is not None:
        ledger.record(phase, steps=steps, trials=1)
    if steps == 0:
        return result

    if objective == "ce":
        targets = None
    elif targets is None or not targets.matches(teacher, data.train, objective):
        targets = TeacherTargets(teacher, data.train, objective, cfg.relation_heads)
    sampler = BatchSampler(len(data.train), cfg.batch_size, cfg.seed)
    opt = AdamW(store, lr=cfg.lr, weight_decay=cfg.weight_decay, warmup=cfg.warmup,
                total_steps=steps, visible=visible_params(store.config, mask))
    best = {k: v.data.copy() for k, v in store.items()}
    evals = _eval_steps(steps, cfg.eval_every)
    want_rel = objective == "tad"
    for step in range(1, steps + 1):
        idx = sampler.next()
        batch, labels = data.train.batch(idx)
        t_out = targets.get(idx) if targets is not None else None
        s_out = forward(store, mask, batch, want_relations=want_rel, relation_heads=cfg.relation_heads)
        loss = objective_loss(objective, t_out, s_out, labels)
        result.losses.append(_check_finite(loss, step, "distill"))
        store.zero_grad()
        T.backward(loss)
        opt.step()
        store.zero_grad()
        if step in evals:
            m = accuracy(store, mask, data.dev)
            result.history.append((step, m))
            if m > result.metric:
                result.metric, result.best_step = m, step
                best = {k: v.data.copy() for k, v in store.items()}
    store.load_arrays(best)
    return result


def train_supervised(model: Model, data: TaskData, cfg: DistillConfig, steps: int,
                     ledger: TrialLedger | None = None, phase: str = "teacher") -> DistillResult:
    """Plain label training (teacher training and the finetune-only baseline)."""
    return distill(None, model, data, cfg, ledger=ledger, phase=phase, steps=steps, objective="ce")


def sample_candidates(n: int, eta: int, rng: np.random.Generator) -> list[int]:
    """Largest and smallest entries plus ``eta - 2`` distinct fillings."""
    if eta > n:
        raise ValueError(f"eta={eta} exceeds grid size n={n}")
    if eta == 1:
        return [n - 1]
    middle = rng.choice(np.arange(1, n - 1), size=eta - 2, replace=False) if eta > 2 else []
    return [n - 1, 0] + sorted(int(i) for i in middle)


def parameter_memory(*stores: SharedParamStore) -> int:
    """Bytes of distinct parameter arrays reachable from ``stores``."""
    seen: dict[int, int] = {}
    for s in stores:
        for t in s.tensors():
            base = t.data if t.data.base is None else t.data.base
            seen[id(base)] = base.nbytes
    return sum(seen.values())


@dataclass
class SandwichResult:
    losses: list[float]
    sampled: list[list[int]]
    param_bytes: int
    optimizer_bytes: int


def sandwich_train(shared: SharedParamStore, grid: CandidateGrid, teacher_snapshot: Model,
                   data: TaskData, cfg: DistillConfig, ledger: TrialLedger | None = None,
                   steps: int | None = None, targets: TeacherTargets | None = None) -> SandwichResult:
    """Jointly distill sampled nested candidates into one shared store.

    Each step draws the largest and the smallest grid entries plus ``eta - 2``
    intermediate ones, sums their distillation losses, and takes a single
    optimizer step on the shared weights.
    """
    steps = cfg.sandwich_steps if steps is None else steps
    n = len(grid)
    if cfg.eta > n:
        raise ValueError(f"eta={cfg.eta} exceeds grid size n={n}")
    if teacher_snapshot.store is shared:
        raise ValueError("teacher snapshot must be a frozen copy, not the shared store")
    if ledger is not None:
        ledger.record("sandwich", steps=steps, trials=1, passes=steps * cfg.eta)
    rng = np.random.default_rng(cfg.seed + 7919)
    sampler = BatchSampler(len(data.train), cfg.batch_size, cfg.seed)
    largest = grid.entries[-1].mask
    opt = AdamW(shared, lr=cfg.lr, weight_decay=cfg.weight_decay, warmup=cfg.warmup,
                total_steps=max(1, steps), visible=visible_params(shared.config, largest))
    if steps and (targets is None or not targets.matches(teacher_snapshot, data.train, cfg.objective)):
        targets = TeacherTargets(teacher_snapshot, data.train, cfg.objective, cfg.relation_heads)
    want_rel = cfg.objective == "tad"
    result = SandwichResult(losses=[], sampled=[], param_bytes=parameter_memory(shared, teacher_snapshot.store),
                            optimizer_bytes=opt.state_nbytes)
    for step in range(1, steps + 1):
        idx = sampler.next()
        batch, labels = data.train.batch(idx)
        t_out = targets.get(idx)
        chosen = sample_candidates(n, cfg.eta, rng)
        shared.zero_grad()
        total = 0.0
        for i in chosen:
            s_out = forward(shared, grid.entries[i].mask, batch, want_relations=want_rel,
                            relation_heads=cfg.relation_heads)
            loss = objective_loss(cfg.objective, t_out, s_out, labels)
            total += _check_finite(loss, step, f"sandwich candidate {i}")
            T.backward(loss)
        opt.step()
        shared.zero_grad()
        result.losses.append(total)
        result.sampled.append(chosen)
    return result


def sandwich_loss(shared: SharedParamStore, grid: CandidateGrid, teacher: Model, batch: Batch,
                  labels, chosen, cfg: DistillConfig) -> Tensor:
    """The summed objective over ``chosen`` entries for one batch (no step)."""
    with T.no_grad():
        t_out = forward(teacher.store, teacher.mask, batch, want_relations=cfg.objective == "tad",
                        relation_heads=cfg.relation_heads)
    total = None
    for i in chosen:
        s_out = forward(shared, grid.entries[i].mask, batch, want_relations=cfg.objective == "tad",
                        relation_heads=cfg.relation_heads)
        term = objective_loss(cfg.objective, t_out, s_out, labels)
        total = term if total is None else total + term
    return total
