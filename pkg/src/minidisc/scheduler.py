"""Teacher-assistant scheduling: tradeoff scores, MiniDisc, MaxiDisc and baselines."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

from .data import TaskData
from .distiller import (DistillConfig, EvalRecord, Model, SandwichResult,
                        TeacherTargets, accuracy, distill, evaluate_candidates, sandwich_train,
                        train_supervised)
from .ledger import TrialLedger
from .model import scale_of
from .pruner import CandidateGrid, build_grid, grid_from_table, structure_at_scale

log = logging.getLogger(__name__)

SELECTION_MODES = ("lambda", "nd")
LAMBDA_SWEEP = (0.1, 0.2, 0.3, 0.5, 0.7)


def lambda_tradeoff(m_a: float, s_a: float, lam: float) -> float:
    """Score a candidate by its metric plus a bonus for the parameters it sheds."""
    if not 0.0 <= m_a <= 1.0:
        raise ValueError(f"metric must lie in [0, 1], got {m_a}")
    if not 0.0 < s_a <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {s_a}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return m_a + lam * (1.0 - s_a)


def _scale_metric(r) -> tuple[float, float]:
    if isinstance(r, EvalRecord):
        return r.target_scale, r.metric
    if isinstance(r, TradeoffRecord):
        return r.target_scale, r.metric
    s, m = r
    return float(s), float(m)


def nd_tradeoff(records, delta: float, tol: float = 1e-6) -> list[float | None]:
    """Negative forward difference of metric over scale.

    ``records`` must be ordered by scale with uniform spacing ``delta``; the
    largest-scale entry has no forward neighbour and gets ``None``.
    """
    pairs = [_scale_metric(r) for r in records]
    if len(pairs) < 2:
        raise ValueError("nd_tradeoff needs at least two records")
    if delta <= 0:
        raise ValueError("delta must be positive")
    out: list[float | None] = []
    for (s0, m0), (s1, m1) in zip(pairs, pairs[1:]):
        if abs((s1 - s0) - delta) > tol:
            raise ValueError(f"non-uniform spacing: {s1} - {s0} != {delta}")
        out.append(-(m1 - m0) / delta + 0.0)  # + 0.0 turns -0.0 into 0.0
    out.append(None)
    return out


@dataclass
class TradeoffRecord:
    index: int
    target_scale: float
    scale: float
    metric: float
    lam: float
    t_lambda: float
    t_nd: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def tradeoff_records(evals: list[EvalRecord], lam: float, delta: float) -> list[TradeoffRecord]:
    evals = sorted(evals, key=lambda r: r.target_scale)
    nd = nd_tradeoff(evals, delta) if len(evals) >= 2 else [None] * len(evals)
    return [TradeoffRecord(r.index, r.target_scale, r.achieved_scale, r.metric, lam,
                           lambda_tradeoff(r.metric, r.achieved_scale, lam), t)
            for r, t in zip(evals, nd)]


@dataclass
class SchedulePlan:
    student_scale: float = 0.10
    n: int = 19
    objective: str = "tsd"
    lam: float = 0.2
    selection: str = "lambda"
    residual: bool = False
    ta_hops: int = 1
    teacher_scale: float = 1.0
    rank_mode: str = "global"
    fixed_ta_scale: float = 0.4
    standalone_ta: bool = False
    standalone_metrics: bool = False

    def __post_init__(self):
        if not 0 < self.student_scale < self.teacher_scale <= 1:
            raise ValueError("need 0 < student_scale < teacher_scale <= 1")
        if self.n < 2:
            raise ValueError("grid count n must be >= 2")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")
        if self.ta_hops < 1:
            raise ValueError("ta_hops must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def select_optimal(records: list[TradeoffRecord], plan: SchedulePlan | None = None,
                   selection: str | None = None) -> int:
    """Candidate index with the best tradeoff; ties go to the smaller scale."""
    if not records:
        raise ValueError("no records to select from")
    mode = selection or (plan.selection if plan else "lambda")
    if len(records) == 1:
        return records[0].index
    if mode == "lambda":
        scored = [(r.t_lambda, r) for r in records]
    else:
        scored = [(r.t_nd, r) for r in records if r.t_nd is not None]
    best_t = max(t for t, _ in scored)
    tied = [r for t, r in scored if t == best_t]
    return min(tied, key=lambda r: (r.target_scale, r.index)).index


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

@dataclass
class ResidualResult:
    metric: float
    pre_metric: float
    post_metric: float
    kept: str


def residual_distill(student: Model, teacher: Model, data: TaskData, cfg: DistillConfig,
                     ledger: TrialLedger | None = None, steps: int | None = None) -> ResidualResult:
    """Continue the student against the original teacher; never end worse."""
    steps = cfg.residual_steps if steps is None else steps
    pre = accuracy(student.store, student.mask, data.dev)
    saved = {k: v.data.copy() for k, v in student.store.items()}
    res = distill(teacher, student, data, cfg, ledger=ledger, phase="residual", steps=steps)
    post = res.history[-1][1]
    final = accuracy(student.store, student.mask, data.dev)
    if final < pre:
        student.store.load_arrays(saved)
        return ResidualResult(pre, pre, post, "pre")
    return ResidualResult(final, pre, post, "post" if final > pre else "pre")


@dataclass
class MinidiscResult:
    student: Model
    student_metric: float
    records: list[TradeoffRecord]
    chosen: int
    ta_scale: float
    grid: CandidateGrid
    ledger: TrialLedger
    sandwich: SandwichResult | None = None
    hops: list[dict] = field(default_factory=list)
    residual: ResidualResult | None = None
    pre_residual_metric: float | None = None


def _score_candidates(plan: SchedulePlan, grid: CandidateGrid, shared_eval, teacher: Model,
                      data: TaskData, cfg: DistillConfig, ledger: TrialLedger) -> list[EvalRecord]:
    if not plan.standalone_metrics:
        return shared_eval
    out = []
    for e, r in zip(grid.entries, shared_eval):
        ta = Model(teacher.store.copy(), e.mask)
        res = distill(teacher, ta, data, cfg, ledger=ledger, phase="ta_distill")
        out.append(replace(r, metric=res.metric))
    return out


def minidisc(plan: SchedulePlan, teacher: Model, data: TaskData, cfg: DistillConfig,
             ledger: TrialLedger | None = None, grid: CandidateGrid | None = None) -> MinidiscResult:
    """Select one teacher assistant in a single sandwich run, then distill the student."""
    ledger = ledger if ledger is not None else TrialLedger()
    cfg = replace(cfg, objective=plan.objective)
    config = teacher.store.config
    if grid is None:
        grid = build_grid(teacher.store, data.train, config, plan.student_scale, plan.n,
                          s_t=plan.teacher_scale, rank_mode=plan.rank_mode,
                          batch_size=cfg.batch_size, seed=cfg.seed)
    shared = teacher.store.copy()
    sw = sandwich_train(shared, grid, teacher, data, cfg, ledger)
    evals = evaluate_candidates(shared, grid, data.dev)
    evals = _score_candidates(plan, grid, evals, teacher, data, cfg, ledger)
    records = tradeoff_records(evals, plan.lam, grid.delta)
    chosen = select_optimal(records, plan)
    entry = grid.entries[chosen]
    hop = {"teacher_scale": plan.teacher_scale, "chosen": chosen, "ta_target": entry.target_scale,
           "ta_scale": entry.achieved_scale, "ta_metric": evals[chosen].metric}
    ta = Model(shared, entry.mask)
    if plan.standalone_ta:
        ta = Model(teacher.store.copy(), entry.mask)
        distill(teacher, ta, data, cfg, ledger=ledger, phase="ta_distill")

    if plan.ta_hops > 1 and chosen > 0 and grid.table is not None:
        sub_n = max(2, min(plan.n, chosen))
        sub_plan = replace(plan, teacher_scale=entry.target_scale, ta_hops=plan.ta_hops - 1,
                           n=sub_n, residual=False)
        sub_grid = grid_from_table(grid.table, config, plan.student_scale, sub_n, s_t=entry.target_scale)
        inner = minidisc(sub_plan, ta, data, replace(cfg, eta=min(cfg.eta, sub_n)), ledger, sub_grid)
        student, metric = inner.student, inner.student_metric
        hops = [hop] + inner.hops
    else:
        student = Model(ta.store.copy(), grid.entries[0].mask)
        metric = distill(ta, student, data, cfg, ledger=ledger, phase="student_distill").metric
        hops = [hop]

    result = MinidiscResult(student=student, student_metric=metric, records=records, chosen=chosen,
                            ta_scale=entry.achieved_scale, grid=grid, ledger=ledger, sandwich=sw,
                            hops=hops, pre_residual_metric=metric)
    if plan.residual:
        result.residual = residual_distill(student, teacher, data, cfg, ledger)
        result.student_metric = result.residual.metric
    return result


def _shared_targets(teacher: Model, data: TaskData, cfg: DistillConfig) -> TeacherTargets | None:
    """Teacher outputs computed once for every run distilling from ``teacher``."""
    if cfg.objective != "tsd" or cfg.steps == 0:
        return None
    return TeacherTargets(teacher, data.train, cfg.objective, cfg.relation_heads)


@dataclass
class MaxidiscResult:
    student: Model
    student_metric: float
    best_index: int
    ta_metrics: list[float]
    student_metrics: list[float]
    grid: CandidateGrid
    ledger: TrialLedger


def maxidisc(plan: SchedulePlan, teacher: Model, data: TaskData, cfg: DistillConfig,
             ledger: TrialLedger | None = None, grid: CandidateGrid | None = None) -> MaxidiscResult:
    """Distill through every grid candidate and keep the best resulting student."""
    ledger = ledger if ledger is not None else TrialLedger()
    cfg = replace(cfg, objective=plan.objective)
    config = teacher.store.config
    if grid is None:
        grid = build_grid(teacher.store, data.train, config, plan.student_scale, plan.n,
                          s_t=plan.teacher_scale, rank_mode=plan.rank_mode,
                          batch_size=cfg.batch_size, seed=cfg.seed)
    ta_metrics, student_metrics = [], []
    best = None
    targets = _shared_targets(teacher, data, cfg)
    for i, entry in enumerate(grid.entries):
        ta = Model(teacher.store.copy(), entry.mask)
        ta_metrics.append(distill(teacher, ta, data, cfg, ledger=ledger,
                                  phase="maxidisc_enumeration", targets=targets).metric)
        student = Model(ta.store.copy(), grid.entries[0].mask)
        m = distill(ta, student, data, cfg, ledger=ledger, phase="student_distill").metric
        student_metrics.append(m)
        # strict improvement keeps the smaller-scale candidate on ties
        if best is None or m > best[0]:
            best = (m, i, student)
    return MaxidiscResult(student=best[2], student_metric=best[0], best_index=best[1],
                          ta_metrics=ta_metrics, student_metrics=student_metrics, grid=grid,
                          ledger=ledger)


@dataclass
class BaselineResult:
    metrics: dict[str, float]
    ledgers: dict[str, TrialLedger]
    ta_scale: float


def baselines(plan: SchedulePlan, teacher: Model, data: TaskData, cfg: DistillConfig,
              grid: CandidateGrid | None = None, methods=("kd", "ta", "ft")) -> BaselineResult:
    """Direct KD, a fixed-scale teacher assistant, and finetune-only at student scale."""
    cfg = replace(cfg, objective=plan.objective)
    config = teacher.store.config
    if grid is None:
        grid = build_grid(teacher.store, data.train, config, plan.student_scale, plan.n,
                          s_t=plan.teacher_scale, rank_mode=plan.rank_mode,
                          batch_size=cfg.batch_size, seed=cfg.seed)
    student_mask = grid.entries[0].mask
    metrics, ledgers = {}, {}
    ta_mask = structure_at_scale(grid.table, config, plan.fixed_ta_scale)
    for name in methods:
        ledger = TrialLedger()
        if name == "kd":
            s = Model(teacher.store.copy(), student_mask)
            metrics[name] = distill(teacher, s, data, cfg, ledger=ledger).metric
        elif name == "ta":
            ta = Model(teacher.store.copy(), ta_mask)
            distill(teacher, ta, data, cfg, ledger=ledger, phase="ta_distill")
            s = Model(ta.store.copy(), student_mask)
            metrics[name] = distill(ta, s, data, cfg, ledger=ledger).metric
        elif name == "ft":
            s = Model(teacher.store.copy(), student_mask)
            metrics[name] = train_supervised(s, data, cfg, cfg.steps, ledger=ledger,
                                             phase="student_distill").metric
        else:
            raise ValueError(f"unknown baseline {name!r}")
        ledgers[name] = ledger
    return BaselineResult(metrics, ledgers, scale_of(config, ta_mask))


def configured_step_ratio(cfg: DistillConfig, n: int) -> float:
    """MaxiDisc optimizer steps over MiniDisc optimizer steps for a config."""
    mini = cfg.sandwich_steps + cfg.steps
    maxi = n * (cfg.steps + cfg.steps)
    if mini == 0:
        raise ValueError("configured_step_ratio: MiniDisc is configured with zero steps")
    return maxi / mini
