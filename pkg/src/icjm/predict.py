"""Dynamic progression-risk prediction for a new patient.

For each of ``L`` posterior draws we sample the patient's random effects
given the biomarker history and the event-free conditions, then evaluate
the progression cumulative incidence from the last biopsy onwards.
All draws are processed together as a leading array axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BaselineCovariates, OutcomeKind, PatientRecord
from .likelihood import (AGE_CENTER, PRG, TRT, T_DF, HazardDesign, ModelParameters, ModelSpec, _cr_mean, _eta,
                         _psa_mean, _t3_logpdf, log_mvn_density, loglik_cr_obs, stack_parameters)
from .mcmc import PosteriorSamples, garthwaite_constant
from .quadrature import IntervalRule, gk15_nodes
from .splines import ncs_design

__all__ = [
    "PredictionContext",
    "PredictionBudget",
    "RiskCurve",
    "CurveSpanError",
    "sample_subject_effects",
    "sample_effects_batch",
    "cumulative_incidence",
    "risk_full",
    "risk_no_treatment",
    "risk_at_visit_biopsy",
    "risk_curve",
    "conditional_risk_from_curve",
    "curve_grid",
]


class CurveSpanError(ValueError):
    """The requested time lies outside the span of a risk curve."""


@dataclass(frozen=True)
class PredictionContext:
    """What is known about a patient at the current visit ``t_v``."""

    history: tuple
    t_b: float
    t_v: float
    t_y: float
    covariates: BaselineCovariates

    def __post_init__(self):
        object.__setattr__(self, "history", tuple(self.history))
        if not 0.0 <= self.t_b <= self.t_v:
            raise ValueError("need 0 <= t_b <= t_v")
        if any(o.time > self.t_y + 1e-12 for o in self.history):
            raise ValueError("history contains observations after t_y")

    @classmethod
    def from_patient(cls, patient: PatientRecord, t_b: float, t_v: float, t_y: float | None = None):
        t_y = t_v if t_y is None else t_y
        hist = tuple(o for o in patient.longitudinal if o.time <= t_y)
        return cls(hist, float(t_b), float(t_v), float(t_y), patient.covariates)

    def psa(self):
        rows = [(o.time, o.value) for o in self.history if o.kind is OutcomeKind.PSA]
        a = np.array(rows, float).reshape(-1, 2)
        return a[:, 0], a[:, 1]

    def core_ratio(self):
        rows = [(o.time, o.value, o.trials) for o in self.history if o.kind is OutcomeKind.CORE_RATIO]
        a = np.array(rows, float).reshape(-1, 3)
        return a[:, 0], a[:, 1], a[:, 2]


@dataclass(frozen=True)
class PredictionBudget:
    n_draws: int = 400
    n_mh: int = 250
    warmup: int = 50
    seed: int = 1

    def to_dict(self) -> dict:
        return {"n_draws": self.n_draws, "n_mh": self.n_mh, "warmup": self.warmup, "seed": self.seed}


def _as_draws(posterior, L: int) -> ModelParameters:
    if isinstance(posterior, PosteriorSamples):
        return posterior.thin_to(L)
    if isinstance(posterior, ModelParameters):
        return posterior if posterior.beta.ndim == 2 else stack_parameters([posterior] * L)
    return stack_parameters(list(posterior))


def _spec_of(posterior, spec):
    if spec is not None:
        return spec
    if isinstance(posterior, PosteriorSamples):
        return posterior.spec
    raise ValueError("a ModelSpec is required when the posterior is given as parameters")


# ------------------------------------------------------- random effects


class _SubjectTarget:
    """Log target of the random effects for a batch of parameter draws."""

    def __init__(self, ctx: PredictionContext, draws: ModelParameters, spec: ModelSpec, condition_on_tv: bool):
        self.draws = draws
        self.spec = spec
        self.agec = ctx.covariates.age - AGE_CENTER
        self.log_d = math.log(ctx.covariates.psa_density)
        t, v = ctx.psa()
        self.C = ncs_design(t, spec.ncs_knots).reshape(-1, 3)
        self.y = np.log2(v + 1.0)
        self.cr_t, self.cr_k, self.cr_n = ctx.core_ratio()
        self.surv = [(PRG, IntervalRule([0.0], [ctx.t_b]))]
        if condition_on_tv:
            self.surv.append((TRT, IntervalRule([0.0], [ctx.t_v])))
        self.designs = [(k, rule, HazardDesign.at(rule.nodes, spec)) for k, rule in self.surv]

    def __call__(self, u: np.ndarray) -> np.ndarray:
        d = self.draws
        total = log_mvn_density(u, d.Omega)
        if self.y.size:
            m = _psa_mean(self.C, d.beta, u, self.agec)
            total = total + np.sum(_t3_logpdf(self.y - m, np.asarray(d.tau_eps)[..., None]), axis=-1)
        if self.cr_t.size:
            total = total + np.sum(loglik_cr_obs(self.cr_k, self.cr_n, _cr_mean(self.cr_t, d.beta, u)), axis=-1)
        for k, rule, design in self.designs:
            if rule.nodes.size:
                with np.errstate(over="ignore"):
                    h = np.exp(_eta(k, design, d, u, self.log_d, self.agec))
                total = total - rule.integrate(h)[..., 0]
        return total

    def proposal_chol(self) -> np.ndarray:
        d = self.draws
        n_u = self.spec.n_u
        L = d.beta.shape[0]
        info = np.zeros((L, n_u, n_u))
        Z = np.column_stack([np.ones(self.C.shape[0]), self.C])
        info[:, :4, :4] = (np.asarray(d.tau_eps) * (T_DF + 1) / (T_DF + 3))[:, None, None] * (Z.T @ Z)
        if n_u > 4 and self.cr_t.size:
            T = np.column_stack([np.ones(self.cr_t.size), self.cr_t, self.cr_t**2])
            info[:, 4:, 4:] += 0.1 * (T.T * self.cr_n) @ T
        cov = np.linalg.inv(info + np.linalg.inv(d.Omega))
        return np.linalg.cholesky(0.5 * (cov + np.swapaxes(cov, 1, 2)))


def sample_effects_batch(ctx: PredictionContext, draws: ModelParameters, spec: ModelSpec, condition_on_tv: bool,
                         n_mh: int = 250, warmup: int = 50, seed=None) -> np.ndarray:
    """One random-effects draw per parameter draw, shape ``(L, n_u)``.

    Each draw runs its own random-walk Metropolis chain of ``n_mh`` steps
    started at zero; proposal scales adapt by Robbins-Monro for the first
    ``warmup`` steps and are then held fixed.
    """
    rng = np.random.default_rng(seed)
    target = _SubjectTarget(ctx, draws, spec, condition_on_tv)
    L = draws.beta.shape[0]
    n_u = spec.n_u
    u = np.zeros((L, n_u))
    lp = target(u)
    if not np.all(np.isfinite(lp)):
        raise ValueError("non-finite random-effects target at the starting point")
    chol = target.proposal_chol()
    log_scale = np.zeros(L)
    k_rm = garthwaite_constant(0.234, n_u)
    base = 2.38 / math.sqrt(n_u)
    for step in range(n_mh):
        z = rng.standard_normal((L, n_u))
        prop = u + (base * np.exp(log_scale))[:, None] * np.einsum("lij,lj->li", chol, z)
        lp_new = target(prop)
        acc = np.log(rng.uniform(size=L)) < np.where(np.isfinite(lp_new), lp_new - lp, -np.inf)
        u = np.where(acc[:, None], prop, u)
        lp = np.where(acc, lp_new, lp)
        if step < warmup:
            log_scale += k_rm / (step + 1 + 10.0) * (acc - 0.234)
    return u


def sample_subject_effects(ctx: PredictionContext, posterior_draw: ModelParameters, condition_on_tv: bool,
                           n_mh: int = 250, seed=None, *, spec: ModelSpec, warmup: int = 50) -> np.ndarray:
    """Final state of a Metropolis chain targeting ``p(u | history, event-free conditions, theta)``."""
    draws = stack_parameters([posterior_draw])
    return sample_effects_batch(ctx, draws, spec, condition_on_tv, n_mh, warmup, seed)[0]


# ---------------------------------------------------------- risk formulas


def _hazard_at(k, t, draws, u, cov, spec):
    d = HazardDesign.at(t, spec)
    with np.errstate(over="ignore"):
        return np.exp(_eta(k, d, draws, u, math.log(cov.psa_density), cov.age - AGE_CENTER))


def _segment_cumhaz(k, lo, hi, draws, u, cov, spec):
    """``∫`` of cause-``k`` hazard over each segment, shape (L, n_segments)."""
    rule = IntervalRule(lo, hi)
    return rule.integrate(_hazard_at(k, rule.nodes, draws, u, cov, spec))


def cumulative_incidence(draws: ModelParameters, u, covariates: BaselineCovariates, spec: ModelSpec,
                         t_b: float, t_v: float, times, *, treatment: bool = True,
                         closed_form: bool = True) -> np.ndarray:
    """Progression cumulative incidence after ``t_b`` at ``times`` for fixed effects ``u``.

    Returns ``(L, len(times))``. With ``treatment`` the competing treatment
    hazard acts from ``t_v`` on (the numerator of the full risk); without it
    the risk reduces to ``1 - exp(-H_prg(t_b, t))``, which is used directly
    when ``closed_form`` is set and otherwise integrated like the full risk.
    """
    times = np.atleast_1d(np.asarray(times, float))
    if np.any(times < t_b - 1e-12):
        raise ValueError("prediction times must not precede t_b")
    if t_v < t_b:
        raise ValueError("need t_b <= t_v")
    u = np.atleast_2d(u)
    order = np.argsort(times, kind="stable")
    ts = times[order]
    if not treatment and closed_form:
        lo = np.concatenate([[t_b], ts[:-1]])
        H = np.cumsum(_segment_cumhaz(PRG, lo, ts, draws, u, covariates, spec), axis=-1)
        out = -np.expm1(-H)
    else:
        cuts = np.unique(np.concatenate([[t_b], ts, [t_v] if treatment and t_v > t_b else []]))
        cuts = cuts[cuts <= max(ts.max(), t_b)]
        lo, hi = cuts[:-1], cuts[1:]
        if lo.size == 0:
            return np.zeros((u.shape[0], times.size))
        outer = IntervalRule(lo, hi)
        nu = outer.nodes
        seg = outer.owner
        h_p = _hazard_at(PRG, nu, draws, u, covariates, spec)
        seg_P = outer.integrate(h_p)
        start_P = np.concatenate([np.zeros(seg_P.shape[:-1] + (1,)), np.cumsum(seg_P, axis=-1)[..., :-1]], axis=-1)
        inner = IntervalRule(lo[seg], nu)
        in_P = inner.integrate(_hazard_at(PRG, inner.nodes, draws, u, covariates, spec))
        expo = start_P[..., seg] + in_P
        if treatment:
            after = lo >= t_v
            h_t_outer = _hazard_at(TRT, nu, draws, u, covariates, spec)
            seg_T = outer.integrate(h_t_outer) * after
            start_T = np.concatenate([np.zeros(seg_T.shape[:-1] + (1,)), np.cumsum(seg_T, axis=-1)[..., :-1]],
                                     axis=-1)
            in_T = inner.integrate(_hazard_at(TRT, inner.nodes, draws, u, covariates, spec)) * after[seg]
            expo = expo + start_T[..., seg] + in_T
        seg_risk = outer.integrate(h_p * np.exp(-expo))
        cum = np.cumsum(seg_risk, axis=-1)
        idx = np.searchsorted(hi, ts)
        out = np.where(ts > t_b, cum[..., np.minimum(idx, hi.size - 1)], 0.0)
    result = np.empty_like(out)
    result[..., order] = out
    return np.clip(result, 0.0, 1.0)


def curve_grid(t_b: float, horizon: float, step: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Risk-curve grid: ``t_b``, the visit breakpoints after it, and 15 Kronrod nodes per step.

    Returns ``(grid, breaks)``.
    """
    if horizon <= t_b:
        raise ValueError("horizon must exceed t_b")
    k0 = math.floor(t_b / step + 1e-9) + 1
    visits = step * np.arange(k0, math.floor(horizon / step + 1e-9) + 1)
    breaks = np.unique(np.concatenate([[t_b], visits[visits > t_b + 1e-12], [horizon]]))
    x, _ = gk15_nodes(breaks[:-1], breaks[1:])
    grid = np.unique(np.concatenate([breaks, x.ravel()]))
    return grid, breaks


@dataclass(eq=False)
class RiskCurve:
    """Per-draw progression risk on a time grid starting at ``t_b``."""

    grid: np.ndarray
    draws: np.ndarray
    t_b: float
    t_v: float | None
    t_y: float
    kind: str = "no_treatment"
    breaks: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        self.draws = np.atleast_2d(np.asarray(self.draws, float))
        if self.draws.shape[-1] != self.grid.size:
            raise ValueError("draws must have one column per grid time")
        if self.breaks is None:
            self.breaks = self.grid.copy()

    @classmethod
    def from_function(cls, f, t_b: float, horizon: float, step: float = 0.5, **kw) -> "RiskCurve":
        """Single-draw curve from a callable ``Π(t)`` (used for analytic curves)."""
        grid, breaks = curve_grid(t_b, horizon, step)
        vals = np.asarray(f(grid), float)
        return cls(grid, vals[None, :], t_b, kw.pop("t_v", None), kw.pop("t_y", t_b), kw.pop("kind", "analytic"),
                   breaks, **kw)

    @property
    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    @property
    def lower(self) -> np.ndarray:
        return np.percentile(self.draws, 2.5, axis=0)

    @property
    def upper(self) -> np.ndarray:
        return np.percentile(self.draws, 97.5, axis=0)

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        tol = 1e-9
        if np.any(t < self.grid[0] - tol) or np.any(t > self.grid[-1] + tol):
            raise CurveSpanError(f"time outside curve span [{self.grid[0]}, {self.grid[-1]}]")
        return np.clip(t, self.grid[0], self.grid[-1])

    def draws_at(self, t) -> np.ndarray:
        """Per-draw values at ``t`` (linear between grid times), shape ``(L,) + t.shape``."""
        t = self._check(t)
        flat = np.atleast_1d(t).ravel()
        j = np.clip(np.searchsorted(self.grid, flat, side="right") - 1, 0, self.grid.size - 2)
        g0, g1 = self.grid[j], self.grid[j + 1]
        w = (flat - g0) / (g1 - g0)
        v = self.draws[:, j] * (1.0 - w) + self.draws[:, j + 1] * w
        exact = flat == g1
        v[:, exact] = self.draws[:, j[exact] + 1]
        return v.reshape((self.draws.shape[0],) + t.shape)

    def mean_at(self, t) -> np.ndarray:
        return self.draws_at(t).mean(axis=0)

    def integrate_mean(self, a: float, b: float) -> float:
        """``∫_a^b`` of the mean curve, GK15 on every step between breakpoints."""
        if b <= a:
            return 0.0
        cuts = np.unique(np.concatenate([[a], self.breaks[(self.breaks > a) & (self.breaks < b)], [b]]))
        x, w = gk15_nodes(cuts[:-1], cuts[1:])
        return float(np.sum(self.mean_at(x.ravel()) * w.ravel()))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("t_p,mean,lower,upper\n")
            for row in zip(self.grid, self.mean, self.lower, self.upper):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
        return path

    def envelope(self) -> dict:
        return {"kind": self.kind, "t_b": self.t_b, "t_v": self.t_v, "t_y": self.t_y, "n_draws": self.draws.shape[0],
                "grid_points": int(self.grid.size), **self.meta}

    def to_json(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.envelope(), indent=2, sort_keys=True))
        return path


def _prepare(ctx, posterior, L, n_mh, seed, spec, condition_on_tv, warmup=50):
    spec = _spec_of(posterior, spec)
    draws = _as_draws(posterior, L)
    u = sample_effects_batch(ctx, draws, spec, condition_on_tv, n_mh, warmup, seed)
    return draws, u, spec


def risk_curve(ctx: PredictionContext, posterior, horizon: float = 10.0, *, budget: PredictionBudget | None = None,
               spec: ModelSpec | None = None, step: float = 0.5) -> RiskCurve:
    """No-treatment progression risk curve from ``t_b`` to ``horizon``."""
    budget = budget or PredictionBudget()
    draws, u, spec = _prepare(ctx, posterior, budget.n_draws, budget.n_mh, budget.seed, spec, False, budget.warmup)
    grid, breaks = curve_grid(ctx.t_b, horizon, step)
    vals = cumulative_incidence(draws, u, ctx.covariates, spec, ctx.t_b, ctx.t_v, grid, treatment=False)
    return RiskCurve(grid, vals, ctx.t_b, ctx.t_v, ctx.t_y, "no_treatment", breaks, {"budget": budget.to_dict()})


def _point_curve(ctx, t_p, vals, kind, t_v):
    t_p = np.atleast_1d(np.asarray(t_p, float))
    return RiskCurve(t_p, vals, ctx.t_b, t_v, ctx.t_y, kind)


def risk_full(ctx: PredictionContext, t_p, posterior, L: int = 400, n_mh: int = 250, seed=None, *,
              spec: ModelSpec | None = None) -> RiskCurve:
    """Progression risk at ``t_p`` accounting for treatment after ``t_v``; random effects conditioned on ``t_v``."""
    if np.any(np.asarray(t_p) < ctx.t_v):
        raise ValueError("need t_b <= t_v <= t_p")
    draws, u, spec = _prepare(ctx, posterior, L, n_mh, seed, spec, True)
    vals = cumulative_incidence(draws, u, ctx.covariates, spec, ctx.t_b, ctx.t_v, t_p, treatment=True)
    return _point_curve(ctx, t_p, vals, "full", ctx.t_v)


def risk_no_treatment(ctx: PredictionContext, t_p, posterior, L: int = 400, n_mh: int = 250, seed=None, *,
                      spec: ModelSpec | None = None) -> RiskCurve:
    """Progression risk at ``t_p`` with the treatment hazard removed (scheduling risk)."""
    if np.any(np.asarray(t_p) < ctx.t_b):
        raise ValueError("need t_b <= t_p")
    draws, u, spec = _prepare(ctx, posterior, L, n_mh, seed, spec, False)
    vals = cumulative_incidence(draws, u, ctx.covariates, spec, ctx.t_b, ctx.t_v, t_p, treatment=False)
    return _point_curve(ctx, t_p, vals, "no_treatment", None)


def risk_at_visit_biopsy(ctx: PredictionContext, t_p, posterior, L: int = 400, n_mh: int = 250, seed=None, *,
                         spec: ModelSpec | None = None) -> RiskCurve:
    """Progression risk at ``t_p`` given a negative biopsy at the current visit (``t_b = t_v``)."""
    if abs(ctx.t_b - ctx.t_v) > 1e-12:
        raise ValueError("risk_at_visit_biopsy needs t_b == t_v")
    if np.any(np.asarray(t_p) < ctx.t_b):
        raise ValueError("need t_b <= t_p")
    draws, u, spec = _prepare(ctx, posterior, L, n_mh, seed, spec, True)
    vals = cumulative_incidence(draws, u, ctx.covariates, spec, ctx.t_b, ctx.t_b, t_p, treatment=True)
    return _point_curve(ctx, t_p, vals, "visit_biopsy", ctx.t_b)


def conditional_risk_from_curve(curve: RiskCurve, t_tilde_b: float, t_e: float) -> float:
    """Risk in ``(t_tilde_b, t_e]`` given no progression by ``t_tilde_b``, averaged over draws.

    Each draw contributes ``(Π(t_e) - Π(t̃_b)) / (1 - Π(t̃_b))``.
    """
    if t_tilde_b < curve.t_b - 1e-12 or t_e < t_tilde_b:
        raise ValueError("need t_b <= t_tilde_b <= t_e")
    pe = curve.draws_at(t_e)
    pb = curve.draws_at(t_tilde_b)
    surv = 1.0 - pb
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(surv > 0, (pe - pb) / surv, 1.0)
    return float(np.clip(r, 0.0, 1.0).mean())
