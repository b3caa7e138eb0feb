"""Evaluation studies: nonparametric cumulative incidence, prediction error,
fixed-versus-personalized biopsy schedules, and hazard-ratio effect curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import special

from .data import Dataset
from .likelihood import PRG, ModelParameters, stack_parameters
from .mcmc import PosteriorSamples
from .predict import PredictionBudget, PredictionContext, cumulative_incidence, risk_at_visit_biopsy
from .schedule import DEFAULT_PHI_GRID, VisitGrid, optimal_threshold
from .simulate import SimulatedPatient, SimulationParams, simulate_patient

__all__ = [
    "CIFEstimate",
    "aalen_johansen",
    "kaplan_meier",
    "events_from_dataset",
    "NoAtRiskError",
    "prediction_error_study",
    "Policy",
    "ScheduleComparisonRow",
    "replay_patient",
    "run_schedule_comparison",
    "summarize_comparison",
    "build_test_cohort",
    "Contrast",
    "psa_value_contrast",
    "psa_change_contrast",
    "core_ratio_contrast",
    "effect_curves",
    "FIXED_SCHEDULES",
]


# ------------------------------------------------------ Aalen-Johansen


@dataclass(frozen=True, eq=False)
class CIFEstimate:
    """Cumulative incidence per cause (columns: cause 1, cause 2) at ``times``."""

    times: np.ndarray
    cif: np.ndarray

    def at(self, t) -> np.ndarray:
        """Right-continuous step value at ``t`` (zero before the first event)."""
        j = np.searchsorted(self.times, np.asarray(t, float), side="right") - 1
        out = np.where((j >= 0)[..., None], self.cif[np.maximum(j, 0)], 0.0)
        return out

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "cif_progression", "cif_treatment"])
            for t, row in zip(self.times, self.cif):
                w.writerow([repr(float(t)), repr(float(row[0])), repr(float(row[1]))])
        return path


def aalen_johansen(events) -> CIFEstimate:
    """Aalen-Johansen cumulative incidence for causes 1 and 2 with right censoring (cause 0).

    At tied times events are processed before censorings.
    """
    ev = list(events)
    if not ev:
        raise ValueError("no observations")
    t = np.array([e[0] for e in ev], float)
    c = np.array([e[1] for e in ev], int)
    if np.any(t < 0) or np.any(~np.isin(c, (0, 1, 2))):
        raise ValueError("need times >= 0 and causes in {0, 1, 2}")
    uniq = np.unique(t[c > 0])
    surv = 1.0
    cif = np.zeros(2)
    rows = []
    for s in uniq:
        at_risk = np.sum(t >= s)
        d1 = np.sum((t == s) & (c == 1))
        d2 = np.sum((t == s) & (c == 2))
        cif = cif + surv * np.array([d1, d2]) / at_risk
        surv *= 1.0 - (d1 + d2) / at_risk
        rows.append(cif.copy())
    return CIFEstimate(uniq, np.array(rows).reshape(-1, 2))


def kaplan_meier(times, observed) -> tuple[np.ndarray, np.ndarray]:
    """Product-limit survival at the distinct event times."""
    t = np.asarray(times, float)
    e = np.asarray(observed, bool)
    order = np.lexsort((~e, t))
    t, e = t[order], e[order]
    n = t.size
    out_t, out_s = [], []
    s = 1.0
    i = 0
    while i < n:
        j = i
        d = 0
        while j < n and t[j] == t[i]:
            d += int(e[j])
            j += 1
        if d:
            s *= 1.0 - d / (n - i)
            out_t.append(t[i])
            out_s.append(s)
        i = j
    return np.array(out_t), np.array(out_s)


def events_from_dataset(ds: Dataset) -> list[tuple[float, int]]:
    """Event list for :func:`aalen_johansen`; interval-censored progression enters at the midpoint."""
    out = []
    for p in ds:
        e = p.event
        if e.delta == 1:
            out.append((0.5 * (e.t_prg_minus + e.t_upper), 1))
        else:
            out.append((e.t_upper, e.delta))
    return out


# ------------------------------------------------------ prediction error


class NoAtRiskError(ValueError):
    """No test patient is event-free and under follow-up at the start time."""


def prediction_error_study(posterior, sims: list[SimulatedPatient], truth: SimulationParams,
                           start_times=(0.0, 1.0, 2.0, 3.0, 4.0, 6.0), window: float = 2.0,
                           budget: PredictionBudget | None = None, spec=None) -> dict:
    """Predicted versus true risk of progression in ``(s, s + window]`` after a negative biopsy at ``s``.

    The true risk uses the generating parameters and each patient's true
    random effects. Returns per-start summaries of ``predicted - true``.
    """
    budget = budget or PredictionBudget()
    spec = spec or (posterior.spec if isinstance(posterior, PosteriorSamples) else truth.spec)
    true_theta = stack_parameters([truth.effective_model()])
    out = {}
    for s in start_times:
        at_risk = [x for x in sims if min(x.true_T_prg, x.true_T_trt) > s and x.censor_time > s]
        if not at_risk:
            raise NoAtRiskError(f"no patient at risk at t = {s}")
        errs = []
        for i, x in enumerate(at_risk):
            rec = x.history_until(s)
            ctx = PredictionContext.from_patient(rec, s, s)
            pred = risk_at_visit_biopsy(ctx, s + window, posterior, budget.n_draws, budget.n_mh,
                                        budget.seed + 7919 * i, spec=spec).mean[0]
            true = cumulative_incidence(true_theta, x.true_u[None, :], rec.covariates, truth.spec, s, s,
                                        [s + window])[0, 0]
            errs.append(pred - true)
        e = np.array(errs)
        out[float(s)] = {"n": int(e.size), "mean_error": float(e.mean()), "sd_error": float(e.std(ddof=1))
                         if e.size > 1 else 0.0, "q025": float(np.percentile(e, 2.5)),
                         "q975": float(np.percentile(e, 97.5))}
    return out


# ---------------------------------------------------- schedule comparison


class Policy(str, Enum):
    ANNUAL = "ANNUAL"
    PASS = "PASS"
    PERSONALIZED = "PERSONALIZED"


FIXED_SCHEDULES = {
    Policy.ANNUAL: tuple(float(x) for x in range(1, 11)),
    Policy.PASS: (1.0, 2.0, 4.0, 6.0, 8.0, 10.0),
}


@dataclass(frozen=True)
class ScheduleComparisonRow:
    patient_id: str
    policy: str
    n_biopsies_conducted: int
    detection_delay: float | None
    progressed: bool
    detection_time: float | None = None
    biopsy_times: tuple = ()
    thresholds: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["biopsy_times"] = list(self.biopsy_times)
        d["thresholds"] = list(self.thresholds)
        return d


def _fixed_replay(sim: SimulatedPatient, policy: Policy, horizon: float) -> ScheduleComparisonRow:
    T = sim.true_T_prg
    times = [0.0]
    for b in FIXED_SCHEDULES[policy]:
        if b > horizon:
            break
        times.append(b)
        if b >= T:
            break
    detected = times[-1] >= T
    return ScheduleComparisonRow(sim.record.patient_id, policy.value, len(times),
                                 times[-1] - T if detected else None, T <= horizon,
                                 times[-1] if detected else None, tuple(times))


def replay_patient(sim: SimulatedPatient, policy: Policy | str, posterior=None, grid: VisitGrid | None = None,
                   max_dd: float | None = 1.5, budget: PredictionBudget | None = None, phi_grid=DEFAULT_PHI_GRID,
                   spec=None, seed_offset: int = 0) -> ScheduleComparisonRow:
    """Follow one patient from the initial negative biopsy at 0 until detection or the horizon.

    The personalized policy re-optimizes the threshold at every visit with
    the data observed so far and biopsies iff the current visit is planned.
    """
    policy = Policy(policy)
    grid = grid or VisitGrid.regular()
    if policy is not Policy.PERSONALIZED:
        return _fixed_replay(sim, policy, grid.horizon)
    budget = budget or PredictionBudget()
    T = sim.true_T_prg
    t_b = 0.0
    times, phis = [0.0], []
    for j, t_v in enumerate(grid.times):
        if t_v <= 0.0:
            continue
        if t_v >= grid.horizon - 1e-9:
            biopsy = True
        else:
            rec = sim.history_until(t_v)
            ctx = PredictionContext.from_patient(rec, t_b, t_v)
            b = PredictionBudget(budget.n_draws, budget.n_mh, budget.warmup, budget.seed + 1000 * seed_offset + j)
            choice = optimal_threshold(ctx, grid, posterior, phi_grid, max_dd, budget=b, spec=spec)
            phis.append(choice.phi)
            biopsy = abs(choice.schedule.planned_times[0] - t_v) < 1e-9
        if biopsy:
            times.append(float(t_v))
            t_b = float(t_v)
            if t_v >= T:
                break
    detected = times[-1] >= T
    return ScheduleComparisonRow(sim.record.patient_id, policy.value, len(times),
                                 times[-1] - T if detected else None, T <= grid.horizon,
                                 times[-1] if detected else None, tuple(times), tuple(phis))


def run_schedule_comparison(posterior, sims: list[SimulatedPatient], policies=tuple(Policy),
                            grid: VisitGrid | None = None, max_dd: float | None = 1.5,
                            budget: PredictionBudget | None = None, phi_grid=DEFAULT_PHI_GRID, spec=None,
                            progress=None):
    """Replay every patient under every policy; returns ``(rows, summary)``."""
    if any(not math.isfinite(s.true_T_prg) and s.true_cause == "" for s in sims):
        raise ValueError("ground truth missing")
    rows = []
    for i, sim in enumerate(sims):
        for pol in policies:
            rows.append(replay_patient(sim, pol, posterior, grid, max_dd, budget, phi_grid, spec, seed_offset=i))
        if progress is not None:
            progress(i + 1, len(sims))
    return rows, summarize_comparison(rows)


def summarize_comparison(rows) -> dict:
    out = {}
    for stratum, flag in (("progressed", True), ("not_progressed", False)):
        out[stratum] = {}
        for pol in sorted({r.policy for r in rows}):
            sel = [r for r in rows if r.policy == pol and r.progressed == flag]
            if not sel:
                continue
            nb = np.array([r.n_biopsies_conducted for r in sel], float)
            dd = np.array([r.detection_delay for r in sel if r.detection_delay is not None], float)
            out[stratum][pol] = {
                "n": len(sel), "mean_biopsies": float(nb.mean()), "median_biopsies": float(np.median(nb)),
                "mean_delay": float(dd.mean()) if dd.size else None,
                "median_delay": float(np.median(dd)) if dd.size else None,
                "undetected": int(sum(r.detection_delay is None for r in sel)) if flag else 0,
            }
    return out


def build_test_cohort(params: SimulationParams, n_progressed: int, n_other: int, seed,
                      max_draws: int = 100000, prefix: str = "t") -> list[SimulatedPatient]:
    """Patients followed to the horizon without early treatment or censoring.

    Patients are drawn in sequence until ``n_progressed`` progress by the
    horizon and ``n_other`` do not.
    """
    p = params.with_updates(treatment=False, censor_range=(params.horizon, params.horizon))
    from .simulate import _EventSolver
    solver = _EventSolver(p.effective_model(), p.spec, p.horizon)
    ss = np.random.SeedSequence(seed)
    prog, other = [], []
    for i in range(max_draws):
        if len(prog) >= n_progressed and len(other) >= n_other:
            break
        child = ss.spawn(1)[0]
        sim = simulate_patient(p, child, f"{prefix}{i + 1:05d}", _solver=solver)
        if sim.true_T_prg <= p.horizon:
            if len(prog) < n_progressed:
                prog.append(sim)
        elif len(other) < n_other:
            other.append(sim)
    if len(prog) < n_progressed or len(other) < n_other:
        raise ValueError("could not fill both strata")
    return prog + other


# ------------------------------------------------------------ effect curves


@dataclass(frozen=True)
class Contrast:
    """``HR = exp(alpha[cause, index] * delta)`` on the transformed covariate scale."""

    name: str
    cause: int
    index: int
    delta: float


def _tr(psa):
    return math.log2(psa + 1.0)


def psa_value_contrast(new: float, ref: float = 5.0, cause: int = PRG) -> Contrast:
    return Contrast(f"psa {new:g} vs {ref:g} ng/ml", cause, 0, _tr(new) - _tr(ref))


def psa_change_contrast(new: float, ref: float = 0.3, level: float = 5.0, cause: int = PRG) -> Contrast:
    """Yearly PSA change ``new`` vs ``ref`` ng/ml ending at the same level."""
    d_new = _tr(level) - _tr(level - new)
    d_ref = _tr(level) - _tr(level - ref)
    return Contrast(f"psa change {new:g} vs {ref:g} ng/ml/yr", cause, 1, d_new - d_ref)


def core_ratio_contrast(new: float, ref: float = 0.15, cause: int = PRG) -> Contrast:
    return Contrast(f"core ratio {new:g} vs {ref:g}", cause, 2, float(special.logit(new) - special.logit(ref)))


def effect_curves(posterior, contrasts, path=None) -> list[dict]:
    """Hazard ratio mean and 95% band per contrast across posterior draws."""
    if isinstance(posterior, PosteriorSamples):
        alpha = posterior.stacked().alpha
    elif isinstance(posterior, ModelParameters):
        alpha = np.atleast_3d(posterior.alpha) if posterior.alpha.ndim == 2 else posterior.alpha
        alpha = alpha.reshape((-1,) + posterior.alpha.shape[-2:])
    else:
        raise TypeError("posterior must be PosteriorSamples or ModelParameters")
    rows = []
    for c in contrasts:
        if c.index >= alpha.shape[-1]:
            raise ValueError(f"contrast {c.name!r} needs association index {c.index}")
        hr = np.exp(alpha[:, c.cause, c.index] * c.delta)
        rows.append({"contrast": c.name, "cause": c.cause, "delta": c.delta, "hr_mean": float(hr.mean()),
                     "hr_lower": float(np.percentile(hr, 2.5)), "hr_upper": float(np.percentile(hr, 97.5))})
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
