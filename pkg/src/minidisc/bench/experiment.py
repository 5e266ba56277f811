"""Experiment runner: teachers, grids, methods, CSV outputs and the ledger report.

Layout of an output directory::

    results.csv                 one row per (task, seed, method)
    ledger_report.csv/.json     steps and trials per method, ratios vs direct KD
    failures.json               runs or methods that raised, with tracebacks
    teachers/<task>-s<seed>.ckpt
    runs/<task>-s<seed>/        grid.json, <method>.json, candidates.csv/.json,
                                structure.csv/.json, *.svg, run_info.json
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from ..distiller import DistillConfig, Model, accuracy, train_supervised
from ..ledger import TrialLedger
from ..model import StructureMask, build_model, load_checkpoint, save_checkpoint
from ..pruner import CandidateGrid, build_grid, pruned_structures, structure_at_scale
from ..scheduler import (baselines, configured_step_ratio, lambda_tradeoff, maxidisc, minidisc,
                         nd_tradeoff)
from . import plots
from .config import METHODS, ExperimentConfig, load_config
from .tasks import TaskSpec, make_task

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("task", "seed", "method", "ta_scale", "student_scale", "metric", "t_lambda",
                  "t_nd", "steps", "trials")
CANDIDATE_COLUMNS = ("index", "target_scale", "achieved_scale", "metric", "t_lambda", "t_nd",
                     "chosen", "ta_metric", "student_metric")
STRUCTURE_COLUMNS = ("layer", "heads", "heads_total", "neurons", "neurons_total")


def fmt(v) -> str:
    """CSV cell text: shortest round-trip repr for floats, empty for missing."""
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[Mapping]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load(path):
    return json.loads(Path(path).read_text())


def run_name(task: TaskSpec, seed: int) -> str:
    return f"{task.name}-s{seed}"


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("MINIDISC_THREADS", "1"))
    except ValueError:
        cap = 1
    return max(1, min(cap, n_jobs))


# ---------------------------------------------------------------------------
# per-run stages
# ---------------------------------------------------------------------------

@dataclass
class RunContext:
    cfg: ExperimentConfig
    task: TaskSpec
    seed: int
    out: Path

    @property
    def name(self) -> str:
        return run_name(self.task, self.seed)

    @property
    def run_dir(self) -> Path:
        d = self.out / "runs" / self.name
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def data_spec(self) -> TaskSpec:
        # each run seed draws its own dataset
        return replace(self.task, seed=self.task.seed + self.seed)

    @property
    def dcfg(self) -> DistillConfig:
        return replace(self.cfg.distill, seed=self.seed)


def _fingerprint(ctx: RunContext) -> str:
    blob = json.dumps({"model": ctx.cfg.model.to_dict(), "task": ctx.data_spec.to_dict(),
                       "teacher": {"steps": ctx.cfg.teacher.steps, "lr": ctx.cfg.teacher.lr},
                       "distill": ctx.dcfg.to_dict(), "seed": ctx.seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def ensure_teacher(ctx: RunContext, data=None) -> tuple[Model, dict]:
    """Train the run's teacher, or reuse a checkpoint trained under the same settings."""
    data = data or make_task(ctx.data_spec)
    path = ctx.out / "teachers" / f"{ctx.name}.ckpt"
    fp = _fingerprint(ctx)
    if path.exists():
        store, extra = load_checkpoint(path)
        if extra.get("fingerprint") == fp:
            return Model(store, StructureMask.ones(store.config)), extra
        log.info("%s: teacher checkpoint is stale, retraining", ctx.name)
    cfg = ctx.cfg
    teacher = Model(build_model(cfg.model, ctx.seed), StructureMask.ones(cfg.model))
    ledger = TrialLedger()
    tcfg = replace(ctx.dcfg, lr=cfg.teacher.lr)
    res = train_supervised(teacher, data, tcfg, cfg.teacher.steps, ledger=ledger)
    extra = {"fingerprint": fp, "task": ctx.task.name, "seed": ctx.seed, "metric": res.metric,
             "steps": cfg.teacher.steps, "history": res.history}
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(teacher.store, path, extra=extra)
    return teacher, extra


def ensure_grid(ctx: RunContext, teacher: Model, data) -> CandidateGrid:
    path = ctx.run_dir / "grid.json"
    fp = _fingerprint(ctx)
    if path.exists():
        d = _load(path)
        if d.get("fingerprint") == fp:
            return CandidateGrid.from_json(d["grid"])
    plan = ctx.cfg.plan
    grid = build_grid(teacher.store, data.train, ctx.cfg.model, plan.student_scale, plan.n,
                      s_t=plan.teacher_scale, rank_mode=plan.rank_mode,
                      batch_size=ctx.dcfg.batch_size, seed=ctx.seed)
    _dump(path, {"fingerprint": fp, "plan": plan.to_dict(), "grid": grid.to_json()})
    return grid


def _ledger_json(ledger: TrialLedger) -> dict:
    return {"phases": ledger.to_dict(), "total_steps": ledger.distill_steps(),
            "total_trials": ledger.distill_trials(), "selection_trials": ledger.selection_trials}


def _run_minidisc(ctx, teacher, data, grid) -> dict:
    ledger = TrialLedger()
    res = minidisc(ctx.cfg.plan, teacher, data, ctx.dcfg, ledger, grid)
    rec = next(r for r in res.records if r.index == res.chosen)
    return {
        "method": "minidisc", "metric": res.student_metric, "ta_scale": res.ta_scale,
        "t_lambda": rec.t_lambda, "t_nd": rec.t_nd, "chosen": res.chosen,
        "records": [r.to_dict() for r in res.records], "hops": res.hops,
        "pre_residual_metric": res.pre_residual_metric,
        "residual": None if res.residual is None else vars(res.residual),
        "structure": pruned_structures(grid.entries[res.chosen].mask),
        "ledger": _ledger_json(ledger),
    }


def _run_maxidisc(ctx, teacher, data, grid) -> dict:
    ledger = TrialLedger()
    plan = ctx.cfg.plan
    res = maxidisc(plan, teacher, data, ctx.dcfg, ledger, grid)
    nd = nd_tradeoff(list(zip(grid.target_scales, res.ta_metrics)), grid.delta)
    best = res.best_index
    scale = grid.entries[best].achieved_scale
    return {
        "method": "maxidisc", "metric": res.student_metric, "ta_scale": scale,
        "t_lambda": lambda_tradeoff(res.ta_metrics[best], scale, plan.lam), "t_nd": nd[best],
        "chosen": best, "ta_metrics": res.ta_metrics, "student_metrics": res.student_metrics,
        "structure": pruned_structures(grid.entries[best].mask),
        "ledger": _ledger_json(ledger),
    }


def _run_baseline(ctx, teacher, data, grid, name: str) -> dict:
    plan = ctx.cfg.plan
    res = baselines(plan, teacher, data, ctx.dcfg, grid, methods=(name,))
    out = {"method": name, "metric": res.metrics[name], "ta_scale": None, "t_lambda": None,
           "t_nd": None, "ledger": _ledger_json(res.ledgers[name])}
    if name == "ta":
        out["ta_scale"] = res.ta_scale
        out["structure"] = pruned_structures(structure_at_scale(grid.table, ctx.cfg.model,
                                                                plan.fixed_ta_scale))
    return out


_RUNNERS = {"minidisc": _run_minidisc, "maxidisc": _run_maxidisc}


def run_single(cfg: ExperimentConfig, task: TaskSpec, seed: int, out_dir, methods=None) -> dict:
    """One (task, seed) run. Failures are caught and reported, never raised."""
    ctx = RunContext(cfg, task, seed, Path(out_dir))
    methods = list(methods or cfg.methods)
    t0 = time.perf_counter()
    outcome = {"task": task.name, "seed": seed, "methods": {}, "failures": []}
    try:
        data = make_task(ctx.data_spec)
        teacher, info = ensure_teacher(ctx, data)
        grid = ensure_grid(ctx, teacher, data)
    except Exception as exc:  # noqa: BLE001 - a broken run must not stop the others
        outcome["failures"].append(_failure(ctx, "setup", exc))
        outcome["runtime"] = time.perf_counter() - t0
        return outcome
    outcome["teacher_metric"] = info.get("metric", accuracy(teacher.store, teacher.mask, data.dev))
    student_scale = grid.entries[0].achieved_scale
    timings = {}
    for m in methods:
        tm = time.perf_counter()
        try:
            if m in _RUNNERS:
                res = _RUNNERS[m](ctx, teacher, data, grid)
            else:
                res = _run_baseline(ctx, teacher, data, grid, m)
        except Exception as exc:  # noqa: BLE001
            outcome["failures"].append(_failure(ctx, m, exc))
            continue
        res.update(task=task.name, seed=seed, student_scale=student_scale)
        _dump(ctx.run_dir / f"{m}.json", res)
        outcome["methods"][m] = res
        timings[m] = time.perf_counter() - tm
    assemble_run(ctx.run_dir, grid)
    outcome["runtime"] = time.perf_counter() - t0
    _dump(ctx.run_dir / "run_info.json", {"runtime_s": outcome["runtime"], "method_runtime_s": timings,
                                          "teacher_metric": outcome["teacher_metric"]})
    return outcome


def _failure(ctx: RunContext, stage: str, exc: BaseException) -> dict:
    log.error("%s/%s failed: %s", ctx.name, stage, exc)
    return {"task": ctx.task.name, "seed": ctx.seed, "stage": stage, "error": repr(exc),
            "traceback": traceback.format_exc()}


# ---------------------------------------------------------------------------
# assembling outputs
# ---------------------------------------------------------------------------

def assemble_run(run_dir, grid: CandidateGrid | None = None) -> None:
    """Rebuild candidates/structure tables and charts of one run from its method files."""
    run_dir = Path(run_dir)
    if grid is None:
        grid = CandidateGrid.from_json(_load(run_dir / "grid.json")["grid"])
    found = {m: _load(run_dir / f"{m}.json") for m in METHODS if (run_dir / f"{m}.json").exists()}
    rows = []
    mini, maxi = found.get("minidisc"), found.get("maxidisc")
    by_index = {r["index"]: r for r in mini["records"]} if mini else {}
    for i, e in enumerate(grid.entries):
        row = {"index": i, "target_scale": e.target_scale, "achieved_scale": e.achieved_scale}
        if i in by_index:
            r = by_index[i]
            row.update(metric=r["metric"], t_lambda=r["t_lambda"], t_nd=r["t_nd"],
                       chosen=i == mini["chosen"])
        if maxi:
            row.update(ta_metric=maxi["ta_metrics"][i], student_metric=maxi["student_metrics"][i])
        rows.append(row)
    write_csv(run_dir / "candidates.csv", CANDIDATE_COLUMNS, rows)
    _dump(run_dir / "candidates.json", {"delta": grid.delta, "candidates": rows})

    src = next((found[m] for m in ("minidisc", "maxidisc", "ta") if m in found), None)
    if src is not None:
        st = src["structure"]
        srows = [{"layer": l, "heads": h, "heads_total": st["heads_total"], "neurons": n,
                  "neurons_total": st["neurons_total"]}
                 for l, (h, n) in enumerate(zip(st["heads"], st["neurons"]))]
        write_csv(run_dir / "structure.csv", STRUCTURE_COLUMNS, srows)
        _dump(run_dir / "structure.json", {"method": src["method"], "ta_scale": src["ta_scale"],
                                           **st})
    plots.plot_run(run_dir)


def collect_rows(out_dir, cfg: ExperimentConfig) -> list[dict]:
    """results.csv rows in config order from every method file present on disk."""
    out = Path(out_dir)
    rows = []
    for task in cfg.tasks:
        for seed in cfg.seeds:
            run_dir = out / "runs" / run_name(task, seed)
            for m in METHODS:
                p = run_dir / f"{m}.json"
                if not p.exists():
                    continue
                r = _load(p)
                rows.append({"task": task.name, "seed": seed, "method": m,
                             "ta_scale": r["ta_scale"], "student_scale": r["student_scale"],
                             "metric": r["metric"], "t_lambda": r["t_lambda"], "t_nd": r["t_nd"],
                             "steps": r["ledger"]["total_steps"],
                             "trials": r["ledger"]["total_trials"]})
    return rows


def report_ledger(ledgers: Mapping[str, Sequence[TrialLedger | dict]]) -> list[dict]:
    """Per method: summed steps and trials over runs, and their ratio to direct KD.

    Values may be TrialLedger objects or the ledger dicts stored in method
    files. Teacher training is excluded; every method shares the teacher.
    """
    if not ledgers:
        raise ValueError("report_ledger needs at least one ledger")

    def totals(items):
        steps = trials = sel = 0
        for l in items:
            if isinstance(l, TrialLedger):
                steps += l.distill_steps()
                trials += l.distill_trials()
                sel += l.selection_trials
            else:
                steps += l["total_steps"]
                trials += l["total_trials"]
                sel += l["selection_trials"]
        return steps, trials, sel

    table = {m: (len(v),) + totals(v) for m, v in ledgers.items()}
    kd = table.get("kd")
    rows = []
    for m in [x for x in METHODS if x in table] + sorted(set(table) - set(METHODS)):
        runs, steps, trials, sel = table[m]
        ratio = lambda a, b: (a / b) if b else None  # noqa: E731
        rows.append({"method": m, "runs": runs, "total_steps": steps, "total_trials": trials,
                     "selection_trials": sel,
                     "steps_vs_kd": ratio(steps, kd[1]) if kd else None,
                     "trials_vs_kd": ratio(trials, kd[2]) if kd else None})
    return rows


LEDGER_COLUMNS = ("method", "runs", "total_steps", "total_trials", "selection_trials",
                  "steps_vs_kd", "trials_vs_kd")


def write_report(out_dir, cfg: ExperimentConfig) -> list[dict]:
    out = Path(out_dir)
    ledgers: dict[str, list] = {}
    for task in cfg.tasks:
        for seed in cfg.seeds:
            for m in METHODS:
                p = out / "runs" / run_name(task, seed) / f"{m}.json"
                if p.exists():
                    ledgers.setdefault(m, []).append(_load(p)["ledger"])
    if not ledgers:
        return []
    rows = report_ledger(ledgers)
    write_csv(out / "ledger_report.csv", LEDGER_COLUMNS, rows)
    try:
        step_ratio = configured_step_ratio(cfg.distill, cfg.plan.n)
    except ValueError:  # dry runs configure no steps at all
        step_ratio = None
    _dump(out / "ledger_report.json", {
        "methods": rows,
        "configured_step_ratio": step_ratio,
        "grid_n": cfg.plan.n,
    })
    return rows


# ---------------------------------------------------------------------------
# top level
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path
    rows: list[dict]
    failures: list[dict]
    outcomes: list[dict] = field(default_factory=list)
    ledger_report: list[dict] = field(default_factory=list)


def run_experiment(config, methods=None, out_dir=None) -> ExperimentResult:
    """Run every (task, seed) of ``config`` and write all outputs.

    ``config`` is a path to a JSON file or an ExperimentConfig. Method files
    from earlier invocations are kept, so stages can run separately and the
    results table always reflects everything on disk.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    methods = list(methods or cfg.methods)
    jobs = [(cfg, task, seed, str(out), methods) for task in cfg.tasks for seed in cfg.seeds]
    workers = worker_count(len(jobs))
    if workers == 1:
        outcomes = [run_single(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_single, *zip(*jobs)))

    failures = [f for o in outcomes for f in o["failures"]]
    fpath = out / "failures.json"
    if failures:
        _dump(fpath, failures)
    elif fpath.exists():
        fpath.unlink()
    rows = collect_rows(out, cfg)
    write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    report = write_report(out, cfg)
    return ExperimentResult(out, rows, failures, outcomes, report)


def prepare(config, stage: str, out_dir=None) -> list[dict]:
    """Run only the teacher (``stage="teacher"``) or teacher plus grid (``"grid"``)."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    out = Path(out_dir or cfg.out_dir)
    info = []
    for task in cfg.tasks:
        for seed in cfg.seeds:
            ctx = RunContext(cfg, task, seed, out)
            data = make_task(ctx.data_spec)
            teacher, extra = ensure_teacher(ctx, data)
            row = {"task": task.name, "seed": seed, "teacher_metric": extra.get("metric")}
            if stage == "grid":
                grid = ensure_grid(ctx, teacher, data)
                row["target_scales"] = grid.target_scales
                row["achieved_scales"] = grid.achieved_scales
            info.append(row)
    return info


def replot(out_dir) -> list[Path]:
    """Regenerate every chart from the CSV files alone."""
    written = []
    for run_dir in sorted((Path(out_dir) / "runs").glob("*")):
        if (run_dir / "candidates.csv").exists():
            written += plots.plot_run(run_dir)
    return written


__all__ = ["run_experiment", "run_single", "report_ledger", "write_report", "collect_rows",
           "assemble_run", "prepare", "replot", "RESULT_COLUMNS"]
