"""Personalized biopsy schedules from a progression-risk curve.

A biopsy is planned at the first future visit where the risk accumulated
since the last (real or planned) negative biopsy reaches the threshold
``phi``; the horizon visit always gets a biopsy. Thresholds are compared
by the expected number of biopsies and the expected detection delay.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .predict import PredictionBudget, PredictionContext, RiskCurve, conditional_risk_from_curve, risk_curve

__all__ = [
    "Decision",
    "VisitGrid",
    "BiopsySchedule",
    "ScheduleMetrics",
    "UndefinedMetricError",
    "DEFAULT_PHI_GRID",
    "decide_current_visit",
    "plan_schedule",
    "generate_schedule",
    "expected_nb",
    "expected_dd",
    "expected_progression_time",
    "schedule_metrics",
    "optimize_threshold_on_curve",
    "optimal_threshold",
    "ThresholdChoice",
]

DEFAULT_PHI_GRID = tuple(np.round(np.arange(0.02, 0.5001, 0.02), 2))


class UndefinedMetricError(ValueError):
    """The curve assigns no progression mass before the horizon."""


class Decision(str, Enum):
    BIOPSY = "BIOPSY"
    DEFER = "DEFER"


def decide_current_visit(risk_at_tv: float, phi: float) -> Decision:
    """Biopsy iff the risk reaches the threshold (``risk >= phi``)."""
    return Decision.BIOPSY if risk_at_tv >= phi else Decision.DEFER


@dataclass(frozen=True)
class VisitGrid:
    times: tuple

    def __post_init__(self):
        t = tuple(float(x) for x in self.times)
        object.__setattr__(self, "times", t)
        if not t or any(b <= a for a, b in zip(t[:-1], t[1:])):
            raise ValueError("visit times must be strictly increasing")
        if t[-1] <= 0:
            raise ValueError("horizon must be positive")

    @classmethod
    def regular(cls, step: float = 0.5, horizon: float = 10.0, start: float = 0.0) -> "VisitGrid":
        n = int(round((horizon - start) / step))
        return cls(tuple(np.round(start + step * np.arange(n + 1), 10)))

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def contains(self, t: float, tol: float = 1e-9) -> bool:
        return any(abs(t - x) <= tol for x in self.times)


@dataclass(frozen=True)
class BiopsySchedule:
    phi: float
    planned_times: tuple
    trace: tuple = ()
    t_b: float = 0.0

    def __len__(self) -> int:
        return len(self.planned_times)

    def to_dict(self) -> dict:
        return {"phi": self.phi, "t_b": self.t_b, "planned_times": list(self.planned_times),
                "trace": [{"t": t, "risk": r, "biopsy": b} for t, r, b in self.trace]}


@dataclass(frozen=True)
class ScheduleMetrics:
    expected_nb: float
    expected_dd: float
    loss: float

    def to_dict(self) -> dict:
        return {"expected_nb": self.expected_nb, "expected_dd": self.expected_dd, "loss": self.loss}


def plan_schedule(curve: RiskCurve, grid: VisitGrid, phi: float, t_v: float | None = None) -> BiopsySchedule:
    """Walk the visits from ``t_v`` to the horizon planning biopsies by threshold.

    ``curve`` is the no-treatment risk conditioned on the last real biopsy
    ``curve.t_b``. At each visit ``t_e`` the risk since the tentative last
    biopsy is taken from the same curve via :func:`conditional_risk_from_curve`.
    """
    t_v = curve.t_b if t_v is None else t_v
    if not grid.contains(t_v) and t_v > grid.times[0]:
        raise ValueError(f"current visit {t_v} is not on the visit grid")
    if curve.horizon < grid.horizon - 1e-9:
        raise ValueError("risk curve ends before the horizon")
    t_tilde = curve.t_b
    planned, trace = [], []
    for t_e in grid.times:
        if t_e < t_v - 1e-9 or t_e <= t_tilde + 1e-9:
            continue
        if t_e >= grid.horizon - 1e-9:
            break
        r = conditional_risk_from_curve(curve, t_tilde, t_e)
        go = decide_current_visit(r, phi) is Decision.BIOPSY
        trace.append((float(t_e), float(r), go))
        if go:
            planned.append(float(t_e))
            t_tilde = t_e
    planned.append(float(grid.horizon))
    return BiopsySchedule(float(phi), tuple(planned), tuple(trace), float(curve.t_b))


def generate_schedule(ctx: PredictionContext, grid: VisitGrid, phi: float, posterior, budget: PredictionBudget | None = None,
                      *, spec=None) -> BiopsySchedule:
    """Risk curve for ``ctx`` followed by :func:`plan_schedule`."""
    curve = risk_curve(ctx, posterior, grid.horizon, budget=budget, spec=spec)
    return plan_schedule(curve, grid, phi, ctx.t_v)


def _masses(schedule: BiopsySchedule, curve: RiskCurve) -> tuple[np.ndarray, np.ndarray]:
    edges = np.concatenate([[curve.t_b], schedule.planned_times])
    pi = curve.mean_at(edges)
    pi[0] = curve.mean_at(curve.t_b)
    total = pi[-1] - pi[0]
    if not total > 0:
        raise UndefinedMetricError("zero progression risk before the horizon")
    return edges, np.diff(pi) / total


def expected_progression_time(curve: RiskCurve, a: float, b: float) -> float:
    """Mean progression time given ``a < T <= b`` from the pooled mean curve."""
    pa, pb = curve.mean_at([a, b])
    mass = pb - pa
    if not mass > 0:
        raise UndefinedMetricError(f"no progression mass in ({a}, {b}]")
    tail = (b - a) * pb - curve.integrate_mean(a, b)
    return float(a + tail / mass)


def expected_nb(schedule: BiopsySchedule, curve: RiskCurve) -> float:
    """Expected number of planned biopsies until detection, given progression by the horizon."""
    _, p = _masses(schedule, curve)
    return float(np.sum(np.arange(1, p.size + 1) * p))


def expected_dd(schedule: BiopsySchedule, curve: RiskCurve) -> float:
    """Expected time from progression to the biopsy that detects it."""
    edges, p = _masses(schedule, curve)
    total = 0.0
    for g in range(p.size):
        if p[g] > 0:
            total += (edges[g + 1] - expected_progression_time(curve, edges[g], edges[g + 1])) * p[g]
    return float(total)


def schedule_metrics(schedule: BiopsySchedule, curve: RiskCurve) -> ScheduleMetrics:
    """Expected biopsies, expected delay and the Euclidean loss; a curve with no mass scores ``(1, 0)``."""
    try:
        nb, dd = expected_nb(schedule, curve), expected_dd(schedule, curve)
    except UndefinedMetricError:
        nb, dd = 1.0, 0.0
    return ScheduleMetrics(nb, dd, math.hypot(nb - 1.0, dd))


@dataclass(frozen=True)
class ThresholdChoice:
    phi: float
    schedule: BiopsySchedule
    metrics: ScheduleMetrics
    constraint_violated: bool = False
    candidates: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {"phi": self.phi, "schedule": self.schedule.to_dict(), "metrics": self.metrics.to_dict(),
                "constraint_violated": self.constraint_violated,
                "candidates": [{"phi": s.phi, **m.to_dict()} for s, m in self.candidates]}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path


def optimize_threshold_on_curve(curve: RiskCurve, grid: VisitGrid, t_v: float | None = None,
                                phi_grid=DEFAULT_PHI_GRID, max_dd: float | None = None) -> ThresholdChoice:
    """Grid search for the loss-minimizing threshold on a fixed risk curve.

    Candidates whose expected delay exceeds ``max_dd`` are dropped when at
    least one candidate satisfies it; otherwise the minimal-delay candidate
    is returned with ``constraint_violated`` set. Ties go to the smaller ``phi``.
    """
    phis = sorted(float(p) for p in phi_grid)
    if not phis:
        raise ValueError("empty threshold grid")
    cands = []
    for phi in phis:
        s = plan_schedule(curve, grid, phi, t_v)
        cands.append((s, schedule_metrics(s, curve)))
    ok = [c for c in cands if max_dd is None or c[1].expected_dd <= max_dd]
    if ok:
        best = min(ok, key=lambda c: c[1].loss)
        return ThresholdChoice(best[0].phi, best[0], best[1], False, tuple(cands))
    best = min(cands, key=lambda c: c[1].expected_dd)
    warnings.warn(f"no threshold meets the delay limit {max_dd}; using the minimal-delay candidate",
                  RuntimeWarning, stacklevel=2)
    return ThresholdChoice(best[0].phi, best[0], best[1], True, tuple(cands))


def optimal_threshold(ctx: PredictionContext, grid: VisitGrid, posterior, phi_grid=DEFAULT_PHI_GRID,
                      max_dd: float | None = 1.5, *, budget: PredictionBudget | None = None, spec=None,
                      curve: RiskCurve | None = None) -> ThresholdChoice:
    """Risk curve for ``ctx`` then :func:`optimize_threshold_on_curve`."""
    if not list(phi_grid):
        raise ValueError("empty threshold grid")
    curve = curve or risk_curve(ctx, posterior, grid.horizon, budget=budget, spec=spec)
    return optimize_threshold_on_curve(curve, grid, ctx.t_v, phi_grid, max_dd)
