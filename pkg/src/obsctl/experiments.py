"""Experiment drivers: the C_p -> C_inf convergence study, the H_p
consistency trace, and numeric harnesses for two limit lemmas on maxima and
power means.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .control import (
    CERTIFICATE_TOL,
    DEFAULT_SCHEDULE,
    ControlSolution,
    eval_Jinf,
    minimize_Jinf,
)
from .grid import INF, ObstacleInstance
from .obstacle import CertificateFailure
from .operators import log_power_sum

BRACKET_SLACK = 1e-9
LIMIT_SLACK = 0.05
MONOTONE_SLACK = 1e-3


@dataclass(frozen=True)
class ConvergenceRow:
    p: float
    C_p: float
    fixed_point_residual: float
    wall_time: float
    converged: bool = True
    hp: float = math.nan


@dataclass
class ConvergenceTable:
    """C_p along a p-schedule plus the ∞ row.

    ``warnings`` are certification or bracket failures and make a run count
    as solved-with-warnings.  ``notes`` hold soft observations (the gap not
    shrinking monotonically) that do not.
    """

    instance_id: str
    rows: list[ConvergenceRow]
    limit: ConvergenceRow | None = None
    warnings: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def C_inf(self) -> float:
        return self.limit.C_p if self.limit is not None else math.nan

    @property
    def gaps(self) -> list[float]:
        return [abs(r.C_p - self.C_inf) for r in self.rows]

    @property
    def gap_at_pmax(self) -> float:
        return self.gaps[-1] if self.rows else math.nan

    @property
    def all_certified(self) -> bool:
        rows = self.rows + ([self.limit] if self.limit is not None else [])
        return self.limit is not None and all(r.converged for r in rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["p", "C_p", "fixed_point_residual", "wall_time_s"])
            for r in self.rows + ([self.limit] if self.limit is not None else []):
                p = "inf" if r.p == INF else repr(float(r.p))
                w.writerow([p, repr(r.C_p), repr(r.fixed_point_residual), repr(r.wall_time)])

    def summary(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "C_inf": self.C_inf,
            "gap_at_pmax": self.gap_at_pmax,
            "all_certified": self.all_certified,
        }

    def write_summary(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def same_numbers(self, other: ConvergenceTable) -> bool:
        """Equality of everything except wall times."""
        def key(t):
            rows = t.rows + ([t.limit] if t.limit is not None else [])
            return [(r.p, r.C_p, r.fixed_point_residual, r.converged, r.hp) for r in rows]
        return key(self) == key(other)


def _bracket_warnings(table: ConvergenceTable, volume: float) -> list[str]:
    out = []
    for r in table.rows:
        # J_p <= (2 vol)^(1/p) times the max-form functional at the same control
        bound = (2.0 * volume) ** (1.0 / r.p) * r.hp
        if r.C_p > bound * (1 + BRACKET_SLACK) + BRACKET_SLACK:
            out.append(f"p={r.p:g}: C_p={r.C_p:.6g} exceeds max-form bound {bound:.6g}")
    if table.limit is not None and table.rows:
        last = table.rows[-1]
        if table.C_inf > last.hp + LIMIT_SLACK:
            out.append(f"C_inf={table.C_inf:.6g} exceeds H_p={last.hp:.6g} at p={last.p:g} by more than {LIMIT_SLACK}")
    return out


def _monotone_notes(table: ConvergenceTable) -> list[str]:
    gaps = table.gaps
    return [
        f"gap grows from p={a.p:g} ({ga:.4g}) to p={b.p:g} ({gb:.4g})"
        for a, b, ga, gb in zip(table.rows, table.rows[1:], gaps, gaps[1:])
        if gb > ga + MONOTONE_SLACK
    ]


def run_convergence_study(
    instance: ObstacleInstance,
    p_schedule: Sequence[float] = DEFAULT_SCHEDULE,
    instance_id: str = "instance",
    certificate_tol: float = CERTIFICATE_TOL,
    stages: list | None = None,
) -> ConvergenceTable:
    """Minimise J_p along the schedule (warm-started) and J_inf at the end."""
    if instance.profile is None:
        raise ValueError("convergence study needs an instance with a profile z")
    z, F = instance.profile, instance.boundary
    collected: list[ControlSolution] = [] if stages is None else stages
    warnings = []
    try:
        final = minimize_Jinf(z, F, p_schedule, certificate_tol=certificate_tol, stages=collected)
    except CertificateFailure as exc:
        final = exc.solution
        warnings.append(str(exc))
    rows = [
        ConvergenceRow(rec.p, rec.objective, rec.fixed_point_residual, rec.wall_time, rec.converged, rec.hp)
        for rec in final.trace
    ]
    for r in rows:
        if not r.converged:
            warnings.append(f"p={r.p:g}: stage not certified (fixed-point residual {r.fixed_point_residual:.3e})")
    stage_time = sum(r.wall_time for r in rows)
    limit = ConvergenceRow(INF, final.objective, final.fixed_point_residual,
                           max(final.report.wall_time - stage_time, 0.0), final.report.converged, final.objective)
    if not limit.converged and not warnings:
        warnings.append("∞ stage not certified")
    table = ConvergenceTable(instance_id, rows, limit, warnings)
    table.warnings.extend(_bracket_warnings(table, instance.grid.volume))
    table.notes.extend(_monotone_notes(table))
    return table


def run_consistency_study(instance: ObstacleInstance, p_schedule: Sequence[float] = DEFAULT_SCHEDULE):
    """``(p, H_p(ψ_p), J_inf(ψ_p))`` along the schedule, ψ_p the J_p minimisers."""
    stages: list[ControlSolution] = []
    table = run_convergence_study(instance, p_schedule, stages=stages)
    return [
        (row.p, row.hp, eval_Jinf(stage.control, instance.profile, instance.boundary))
        for row, stage in zip(table.rows, stages)
    ]


def max_workers() -> int:
    raw = os.environ.get("OBSCTL_MAX_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, min(4, os.cpu_count() or 1))


def run_studies(instances: dict[str, ObstacleInstance], p_schedule=DEFAULT_SCHEDULE) -> dict[str, ConvergenceTable]:
    """Independent studies in parallel; each schedule stays sequential."""
    names = sorted(instances)
    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        tables = pool.map(lambda n: run_convergence_study(instances[n], p_schedule, n), names)
        return dict(zip(names, tables))


# -- limit lemma harnesses ---------------------------------------------------

@dataclass(frozen=True)
class SequencePair:
    """Two sequences indexed by p with known limits."""

    a: Callable[[float], float]
    b: Callable[[float], float]
    a_limit: float
    b_limit: float


@dataclass
class HarnessReport:
    cases: int
    failures: list[str]
    worst: float

    @property
    def passed(self) -> bool:
        return not self.failures

    def __bool__(self):
        return self.passed


def random_sequence_pairs(n: int = 100, seed: int = 0) -> list[SequencePair]:
    """Nonnegative sequences ``lim + c * decay(p)`` with random limits."""
    rng = np.random.default_rng(seed)
    decays = (
        lambda p, k: 1.0 / p**k,
        lambda p, k: abs(math.sin(p)) / p**k,
        lambda p, k: math.log1p(p) / p**(k + 1.0),
    )
    out = []
    for _ in range(n):
        lims = rng.uniform(0.0, 5.0, 2) * (rng.uniform(size=2) > 0.1)
        coef = rng.uniform(-1.0, 1.0, 2)
        kinds = rng.integers(0, len(decays), 2)
        powers = rng.uniform(1.2, 2.5, 2)

        def seq(i):
            lim, c, d, k = float(lims[i]), float(coef[i]), decays[kinds[i]], float(powers[i])
            return lambda p: max(0.0, lim + c * d(p, k))

        out.append(SequencePair(seq(0), seq(1), float(lims[0]), float(lims[1])))
    return out


def check_liminf_max(samples: Sequence[SequencePair], eps: float = 1e-6,
                     tail: Sequence[float] = (1e6, 1e7, 1e8)) -> HarnessReport:
    """``max(a_p, b_p)`` is within ``eps`` of ``max(lim a, lim b)`` on the tail."""
    failures, worst = [], 0.0
    for k, s in enumerate(samples):
        target = max(s.a_limit, s.b_limit)
        err = max(abs(max(s.a(p), s.b(p)) - target) for p in tail)
        worst = max(worst, err)
        if err > eps:
            failures.append(f"case {k}: |max - limit| = {err:.3e}")
    return HarnessReport(len(samples), failures, worst)


def log_power_mean2(a: float, b: float, p: float) -> float:
    """``log((a^p + b^p)^(1/p))``; ``-inf`` when both vanish."""
    return log_power_sum(np.array([a, b]), np.ones(2), p) / p


def random_pairs(n: int = 100, seed: int = 0) -> list[tuple[float, float]]:
    rng = np.random.default_rng(seed)
    pairs = rng.uniform(0.0, 10.0, (n, 2)) * 10.0 ** rng.integers(-3, 4, (n, 1))
    pairs[rng.uniform(size=n) < 0.1, 1] = 0.0
    return [tuple(map(float, row)) for row in pairs]


POWER_SCHEDULE = tuple(2.0**k for k in range(1, 11))


def check_power_mean(samples: Sequence, p_values: Sequence[float] = POWER_SCHEDULE,
                     rel: float = 1e-12, eps: float = 1e-3) -> HarnessReport:
    """Sandwich ``max <= (a^p + b^p)^(1/p) <= 2^(1/p) max`` at every p and
    closeness to ``max(a, b)`` (relative ``eps``) at the largest p.

    Samples are ``(a, b)`` pairs or :class:`SequencePair`; all comparisons
    happen in log space.
    """
    failures, worst = [], 0.0
    top = max(p_values)
    for k, s in enumerate(samples):
        for p in p_values:
            a, b = (s.a(p), s.b(p)) if isinstance(s, SequencePair) else s
            if a < 0 or b < 0:
                failures.append(f"case {k}: negative input")
                break
            m = max(a, b)
            if m == 0.0:
                continue
            lv, lm = log_power_mean2(a, b, p), math.log(m)
            lower = lm - lv
            upper = lv - (lm + math.log(2.0) / p)
            if lower > rel or upper > rel:
                failures.append(f"case {k}, p={p:g}: sandwich violated by {max(lower, upper):.3e}")
            if p == top:
                err = abs(math.exp(lv - lm) - 1.0)
                worst = max(worst, err)
                if err > eps:
                    failures.append(f"case {k}: |mean - max| = {err:.3e} at p={p:g}")
    return HarnessReport(len(samples), failures, worst)


__all__ = [
    "ConvergenceRow",
    "ConvergenceTable",
    "HarnessReport",
    "SequencePair",
    "check_liminf_max",
    "check_power_mean",
    "random_pairs",
    "random_sequence_pairs",
    "run_consistency_study",
    "run_convergence_study",
    "run_studies",
]
