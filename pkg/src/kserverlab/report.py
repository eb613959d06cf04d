"""Small report record shared by all verification passes."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class CheckReport:
    name: str
    passed: bool
    max_violation: float = 0.0
    tol: float = 0.0
    n_checked: int = 0
    notes: str = ""
    violations: list = field(default_factory=list)  # (where, amount) pairs

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" [{self.notes}]" if self.notes else ""
        return (f"{status}  {self.name}: max violation {self.max_violation:.3e} "
                f"(tol {self.tol:.1e}, {self.n_checked} checks){extra}")


def merge_reports(name, reports):
    return CheckReport(
        name=name,
        passed=all(r.passed for r in reports),
        max_violation=max((r.max_violation for r in reports), default=0.0),
        tol=min((r.tol for r in reports if r.tol), default=0.0),
        n_checked=sum(r.n_checked for r in reports),
        notes="; ".join(r.notes for r in reports if r.notes),
    )
