"""Accounting of optimizer steps and full distillation trials per phase."""
from __future__ import annotations

from dataclasses import dataclass, field

PHASES = ("teacher", "sandwich", "ta_distill", "student_distill", "maxidisc_enumeration",
          "residual")


@dataclass
class PhaseCount:
    steps: int = 0
    trials: int = 0
    passes: int = 0  # candidate forward/backward passes


@dataclass
class TrialLedger:
    phases: dict[str, PhaseCount] = field(default_factory=lambda: {p: PhaseCount() for p in PHASES})

    def record(self, phase: str, steps: int = 0, trials: int = 0, passes: int | None = None) -> None:
        if phase not in self.phases:
            raise KeyError(f"unknown ledger phase {phase!r}")
        if steps < 0 or trials < 0:
            raise ValueError("ledger counts only grow")
        c = self.phases[phase]
        c.steps += steps
        c.trials += trials
        c.passes += steps if passes is None else passes

    @property
    def total_steps(self) -> int:
        return sum(c.steps for c in self.phases.values())

    @property
    def total_trials(self) -> int:
        return sum(c.trials for c in self.phases.values())

    @property
    def selection_trials(self) -> int:
        """Full runs spent on choosing a teacher assistant."""
        return self.phases["sandwich"].trials + self.phases["maxidisc_enumeration"].trials

    def distill_steps(self) -> int:
        return self.total_steps - self.phases["teacher"].steps

    def distill_trials(self) -> int:
        return self.total_trials - self.phases["teacher"].trials

    def merged(self, other: "TrialLedger") -> "TrialLedger":
        out = TrialLedger()
        for p in PHASES:
            for src in (self, other):
                c = src.phases[p]
                out.record(p, c.steps, c.trials, c.passes)
        return out

    def to_dict(self) -> dict:
        return {p: {"steps": c.steps, "trials": c.trials, "passes": c.passes}
                for p, c in self.phases.items()}
