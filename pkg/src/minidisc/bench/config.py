"""Experiment configuration: one JSON document validated before any training."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..distiller import DistillConfig
from ..model import ModelConfig
from ..scheduler import SchedulePlan
from .tasks import TaskSpec

METHODS = ("minidisc", "maxidisc", "kd", "ta", "ft")
BASELINE_METHODS = ("kd", "ta", "ft")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists ``field: message`` lines."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid experiment config:\n  " + "\n  ".join(problems))


@dataclass
class TeacherConfig:
    steps: int = 600
    lr: float = 3e-3

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    tasks: list[TaskSpec] = field(default_factory=lambda: [TaskSpec(kind=k) for k in
                                                           ("parity-of-marked-tokens", "majority-class",
                                                            "pair-similarity")])
    plan: SchedulePlan = field(default_factory=SchedulePlan)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
            "plan": self.plan.to_dict(),
            "distill": self.distill.to_dict(),
            "teacher": {"steps": self.teacher.steps, "lr": self.teacher.lr},
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _build(cls, raw, where: str, problems: list[str]):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected an object, got {type(raw).__name__}")
        return None
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    for k in unknown:
        problems.append(f"{where}.{k}: unknown field")
    if unknown:
        return None
    before = len(problems)
    for f in fields(cls):
        if f.name in raw:
            _check_value(f, raw[f.name], where, problems)
    if len(problems) > before:
        return None
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _check_value(f, v, where: str, problems: list[str]) -> None:
    """Catch JSON values of the wrong kind before a constructor trips over them."""
    expected = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "")
    optional = expected.endswith("| None")
    if optional:
        if v is None:
            return
        expected = expected[: -len("| None")].strip()
    if expected == "int" and (isinstance(v, bool) or not isinstance(v, int)):
        problems.append(f"{where}.{f.name}: expected an integer, got {v!r}")
    elif expected == "float" and (isinstance(v, bool) or not isinstance(v, (int, float))):
        problems.append(f"{where}.{f.name}: expected a number, got {v!r}")
    elif expected == "bool" and not isinstance(v, bool):
        problems.append(f"{where}.{f.name}: expected true/false, got {v!r}")
    elif expected == "str" and not isinstance(v, str):
        problems.append(f"{where}.{f.name}: expected a string, got {v!r}")


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate every field and collect all problems before raising."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError([f"top level: expected an object, got {type(raw).__name__}"])
    known = {f.name for f in fields(ExperimentConfig)}
    for k in sorted(set(raw) - known):
        problems.append(f"{k}: unknown field")

    model = _build(ModelConfig, raw.get("model"), "model", problems)
    plan = _build(SchedulePlan, raw.get("plan"), "plan", problems)
    dcfg = _build(DistillConfig, raw.get("distill"), "distill", problems)
    teacher = _build(TeacherConfig, raw.get("teacher"), "teacher", problems)

    tasks_raw = raw.get("tasks")
    tasks = []
    if tasks_raw is None:
        tasks = ExperimentConfig().tasks
    elif not isinstance(tasks_raw, list) or not tasks_raw:
        problems.append("tasks: expected a non-empty list")
    else:
        for i, t in enumerate(tasks_raw):
            spec = _build(TaskSpec, t, f"tasks[{i}]", problems)
            if spec is not None:
                tasks.append(spec)
        names = [t.name for t in tasks]
        if len(set(names)) != len(names):
            problems.append("tasks: each task kind may appear only once")

    methods = raw.get("methods", list(METHODS))
    if not isinstance(methods, list) or not methods:
        problems.append("methods: expected a non-empty list")
        methods = []
    for m in methods:
        if m not in METHODS:
            problems.append(f"methods: unknown method {m!r}; expected one of {METHODS}")
    seeds = raw.get("seeds", [0, 1, 2])
    if (not isinstance(seeds, list) or not seeds
            or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds)):
        problems.append("seeds: expected a non-empty list of non-negative integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("seeds: duplicates are not allowed")
    out_dir = raw.get("out_dir", "runs/default")
    if not isinstance(out_dir, str) or not out_dir:
        problems.append("out_dir: expected a path string")

    # cross-field checks
    if model is not None:
        for i, t in enumerate(tasks):
            if t.vocab != model.vocab:
                problems.append(f"tasks[{i}].vocab: {t.vocab} differs from model.vocab {model.vocab}")
            if t.length > model.max_len:
                problems.append(f"tasks[{i}].length: {t.length} exceeds model.max_len {model.max_len}")
            if t.n_classes != model.n_classes:
                problems.append(f"tasks[{i}].n_classes: {t.n_classes} differs from model.n_classes "
                                f"{model.n_classes}")
        if dcfg is not None and dcfg.objective == "tad" and model.aux_width % dcfg.relation_heads:
            problems.append(f"distill.relation_heads: {dcfg.relation_heads} does not divide the "
                            f"relation width {model.aux_width}")
    if plan is not None and dcfg is not None:
        if dcfg.eta > plan.n:
            problems.append(f"distill.eta: {dcfg.eta} exceeds plan.n {plan.n}")
        if plan.objective != dcfg.objective:
            problems.append(f"plan.objective {plan.objective!r} differs from distill.objective "
                            f"{dcfg.objective!r}")
    if plan is not None and not plan.student_scale < plan.fixed_ta_scale < plan.teacher_scale:
        problems.append("plan.fixed_ta_scale: must lie between student_scale and teacher_scale")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(model=model, tasks=tasks, plan=plan, distill=dcfg, teacher=teacher,
                            methods=list(methods), seeds=list(seeds), out_dir=out_dir)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from None
    return parse_config(raw)


def with_overrides(cfg: ExperimentConfig, *, lam=None, eta=None, n=None, selection=None,
                   residual=None, seed=None, methods=None, out_dir=None) -> ExperimentConfig:
    """Apply command-line overrides, re-validating the result."""
    raw = cfg.to_dict()
    if lam is not None:
        raw["plan"]["lam"] = lam
    if eta is not None:
        raw["distill"]["eta"] = eta
    if n is not None:
        raw["plan"]["n"] = n
    if selection is not None:
        raw["plan"]["selection"] = selection
    if residual:
        raw["plan"]["residual"] = True
    if seed is not None:
        raw["seeds"] = [seed]
    if methods is not None:
        raw["methods"] = list(methods)
    if out_dir is not None:
        raw["out_dir"] = str(out_dir)
    return parse_config(raw)


def dry_run(cfg: ExperimentConfig) -> ExperimentConfig:
    """Same experiment with every step count set to zero."""
    return replace(cfg, teacher=replace(cfg.teacher, steps=0),
                   distill=replace(cfg.distill, steps=0, sandwich_steps=0, residual_steps=0))
