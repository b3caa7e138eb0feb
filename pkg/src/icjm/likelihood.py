"""Model densities: longitudinal submodels, cause-specific hazards, joint likelihood, priors.

Parameter arrays may carry leading "draw" dimensions (see
:func:`stack_parameters`); every hazard and mean function broadcasts over
them, which is how prediction evaluates many posterior draws at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import special

from .data import Dataset, OutcomeKind, PatientRecord
from .quadrature import IntervalRule, gk15_nodes, panel_edges
from .splines import (KnotVector, PenaltyMatrix, bspline_design, difference_penalty, h0_knots_from_times,
                      ncs_design, ncs_knots_from_times)

__all__ = [
    "PRG",
    "TRT",
    "CAUSES",
    "Variant",
    "PriorConfig",
    "ModelSpec",
    "ModelParameters",
    "stack_parameters",
    "mean_psa",
    "mean_cr_logit",
    "loglik_psa_obs",
    "loglik_cr_obs",
    "log_hazard",
    "hazard",
    "cumulative_hazard",
    "loglik_survival",
    "loglik_longitudinal",
    "log_mvn_density",
    "loglik_joint",
    "log_prior",
    "log_iw_density",
    "CohortLikelihood",
    "VariantError",
    "AGE_CENTER",
    "spec_from_dataset",
]

PRG, TRT = 0, 1
CAUSES = {"PRG": PRG, "TRT": TRT}
AGE_CENTER = 62.0
T_DF = 3.0


class VariantError(ValueError):
    """An operation was requested that the model variant does not have."""


class Variant(str, Enum):
    ICJM1 = "ICJM1"
    ICJM2 = "ICJM2"


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperconstants; Gamma distributions use (shape, rate)."""

    normal_var: float = 100.0
    tau_eps: tuple = (0.01, 0.01)
    tau_h0: tuple = (5.0, 0.5)
    tau_u: tuple = (0.5, 0.01)
    iw_scale: float = 4.0

    def to_dict(self) -> dict:
        return {"normal_var": self.normal_var, "tau_eps": list(self.tau_eps), "tau_h0": list(self.tau_h0),
                "tau_u": list(self.tau_u), "iw_scale": self.iw_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(d["normal_var"], tuple(d["tau_eps"]), tuple(d["tau_h0"]), tuple(d["tau_u"]), d["iw_scale"])


@dataclass(frozen=True, eq=False)
class ModelSpec:
    variant: Variant
    ncs_knots: KnotVector
    h0_knots: KnotVector
    penalty: PenaltyMatrix = None
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.penalty is None:
            object.__setattr__(self, "penalty", difference_penalty(self.n_h0, 2))
        if self.penalty.dim != self.n_h0:
            raise ValueError(f"penalty dim {self.penalty.dim} != number of baseline-hazard coefficients {self.n_h0}")
        if len(self.ncs_knots.interior) != 2:
            raise ValueError("the PSA natural spline uses exactly two interior knots (3 df)")

    @property
    def n_h0(self) -> int:
        return len(self.h0_knots.interior) + 4

    @property
    def n_u(self) -> int:
        return 4 if self.variant is Variant.ICJM1 else 7

    @property
    def n_beta(self) -> int:
        return 5 if self.variant is Variant.ICJM1 else 8

    @property
    def n_alpha(self) -> int:
        return 2 if self.variant is Variant.ICJM1 else 3

    def to_dict(self) -> dict:
        return {"variant": self.variant.value, "ncs_knots": self.ncs_knots.to_dict(),
                "h0_knots": self.h0_knots.to_dict(), "penalty": self.penalty.to_dict(),
                "priors": self.priors.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(Variant(d["variant"]), KnotVector.from_dict(d["ncs_knots"]), KnotVector.from_dict(d["h0_knots"]),
                   PenaltyMatrix.from_dict(d["penalty"]), PriorConfig.from_dict(d["priors"]))



def spec_from_dataset(ds: Dataset, variant: Variant | str = Variant.ICJM1, priors: PriorConfig | None = None) -> ModelSpec:
    """Knots chosen from the data.

    PSA spline knots sit at the tertiles of the PSA measurement times.
    Baseline-hazard knots sit at quantiles of the distinct observed event
    times rounded to quarter years, with interval-censored progressions
    entering at the interval midpoint. Rounding and de-duplication stop the
    midpoints of a shared biopsy grid from stacking knots on one spot. The
    upper boundary is the longest follow-up.
    """
    psa_t = np.concatenate([p.psa()[0] for p in ds])
    ev = [0.5 * (p.event.t_prg_minus + p.event.t_upper) if p.event.delta == 1 else p.event.t_upper
          for p in ds if p.event.delta > 0]
    if len(ev) < 2:
        ev = [p.event.t_upper for p in ds]
    upper = max(p.event.t_upper for p in ds)
    ev = np.unique(np.round(np.asarray(ev) * 4.0) / 4.0)
    ev = ev[(ev > 0.0) & (ev < upper)]
    return ModelSpec(Variant(variant), ncs_knots_from_times(psa_t), h0_knots_from_times(ev, upper),
                     priors=priors or PriorConfig())

@dataclass(eq=False)
class ModelParameters:
    """Population-level parameters of one joint model.

    ``gamma_h0[k]``, ``tau_h0[k]``, ``gamma[k]`` and ``alpha[k]`` are indexed by
    cause (``PRG = 0``, ``TRT = 1``); ``alpha[k]`` holds the PSA value and
    PSA yearly-change associations, then the core-ratio value under ICJM 2.
    """

    beta: np.ndarray
    tau_eps: float
    Omega: np.ndarray
    tau_u: float
    gamma_h0: np.ndarray
    tau_h0: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        for name in ("beta", "Omega", "gamma_h0", "tau_h0", "gamma", "alpha"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        self.tau_eps = np.asarray(self.tau_eps, dtype=float)
        self.tau_u = np.asarray(self.tau_u, dtype=float)
        if self.tau_eps.ndim == 0:
            self.tau_eps = float(self.tau_eps)
            self.tau_u = float(self.tau_u)

    @property
    def n_draws(self) -> int | None:
        return None if self.beta.ndim == 1 else self.beta.shape[0]

    def validate(self) -> None:
        if self.beta.ndim != 1:
            raise ValueError("validate() applies to a single parameter set")
        if not self.tau_eps > 0:
            raise ValueError("tau_eps > 0")
        if not self.tau_u > 0:
            raise ValueError("tau_u > 0")
        if np.any(~(self.tau_h0 > 0)):
            raise ValueError("tau_h0 > 0")
        if not np.allclose(self.Omega, self.Omega.T):
            raise ValueError("Omega symmetric")
        np.linalg.cholesky(self.Omega)

    def copy(self) -> "ModelParameters":
        return ModelParameters(**{k: np.copy(v) for k, v in self.as_dict().items()})

    def as_dict(self) -> dict:
        return {"beta": self.beta, "tau_eps": self.tau_eps, "Omega": self.Omega, "tau_u": self.tau_u,
                "gamma_h0": self.gamma_h0, "tau_h0": self.tau_h0, "gamma": self.gamma, "alpha": self.alpha}

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in self.as_dict().items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParameters":
        return cls(**{k: np.asarray(d[k], dtype=float) for k in
                      ("beta", "tau_eps", "Omega", "tau_u", "gamma_h0", "tau_h0", "gamma", "alpha")})

    def flat(self) -> dict[str, float]:
        """Scalar view keyed by readable names (used for diagnostics)."""
        out = {}
        for i, b in enumerate(self.beta):
            out[f"beta[{i}]"] = float(b)
        out["tau_eps"] = float(self.tau_eps)
        out["tau_u"] = float(self.tau_u)
        n = self.Omega.shape[0]
        for i in range(n):
            for j in range(i, n):
                out[f"Omega[{i},{j}]"] = float(self.Omega[i, j])
        names = ("PRG", "TRT")
        assoc = ("psa_value", "psa_change", "cr_value")
        for k, cause in enumerate(names):
            out[f"gamma[{cause}]"] = float(self.gamma[k])
            out[f"tau_h0[{cause}]"] = float(self.tau_h0[k])
            for j in range(self.alpha.shape[1]):
                out[f"alpha[{cause},{assoc[j]}]"] = float(self.alpha[k, j])
            for a in range(self.gamma_h0.shape[1]):
                out[f"gamma_h0[{cause},{a}]"] = float(self.gamma_h0[k, a])
        return out


def stack_parameters(draws) -> ModelParameters:
    """Stack single parameter sets along a new leading draw axis."""
    draws = list(draws)
    return ModelParameters(**{k: np.stack([np.asarray(getattr(d, k), dtype=float) for d in draws])
                              for k in draws[0].as_dict()})


# ------------------------------------------------------------ longitudinal


def _psa_mean(C: np.ndarray, beta: np.ndarray, u: np.ndarray, agec) -> np.ndarray:
    b = beta[..., :4] + u[..., :4]
    return b[..., :1] + np.einsum("np,...p->...n", C, b[..., 1:4]) + beta[..., 4:5] * agec


def _cr_mean(t: np.ndarray, beta: np.ndarray, u: np.ndarray) -> np.ndarray:
    b = beta[..., 5:8] + u[..., 4:7]
    return b[..., :1] + b[..., 1:2] * t + b[..., 2:3] * t**2


def mean_psa(t, beta, u, age: float, knots: KnotVector):
    """Expected ``log2(PSA + 1)`` at time(s) ``t``."""
    t_arr = np.asarray(t, dtype=float)
    C = ncs_design(np.atleast_1d(t_arr).ravel(), knots)
    m = _psa_mean(C, np.asarray(beta, float), np.asarray(u, float), age - AGE_CENTER)
    return m.reshape(m.shape[:-1] + t_arr.shape) if t_arr.ndim else m[..., 0]


def mean_cr_logit(t, beta, u):
    """Logit of the expected core ratio (ICJM 2 only)."""
    beta = np.asarray(beta, float)
    u = np.asarray(u, float)
    if beta.shape[-1] < 8 or u.shape[-1] < 7:
        raise VariantError("core-ratio submodel needs the ICJM 2 parameterization (8 betas, 7 random effects)")
    t_arr = np.asarray(t, dtype=float)
    m = _cr_mean(np.atleast_1d(t_arr).ravel(), beta, u)
    return m.reshape(m.shape[:-1] + t_arr.shape) if t_arr.ndim else m[..., 0]


def _t3_logpdf(resid, tau_eps):
    return (special.gammaln((T_DF + 1) / 2) - special.gammaln(T_DF / 2) - 0.5 * np.log(T_DF * np.pi)
            + 0.5 * np.log(tau_eps) - (T_DF + 1) / 2 * np.log1p(tau_eps * resid**2 / T_DF))


def loglik_psa_obs(value, m, tau_eps):
    """Log density of raw PSA ``value`` (ng/ml) given the transformed-scale mean ``m``.

    The residual ``log2(value + 1) - m`` follows a Student-t with 3 degrees of
    freedom and precision ``tau_eps`` (scale ``1 / sqrt(tau_eps)``).
    """
    if np.any(np.asarray(tau_eps) <= 0):
        raise ValueError("tau_eps must be positive")
    return _t3_logpdf(np.log2(np.asarray(value, float) + 1.0) - m, tau_eps)


def _binom_logcoef(k, n):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def loglik_cr_obs(positives, trials, logit_p):
    """Binomial log-pmf of ``positives`` out of ``trials`` at ``expit(logit_p)``."""
    k = np.asarray(positives, float)
    n = np.asarray(trials, float)
    if np.any(k < 0) or np.any(k > n) or np.any(k != np.round(k)) or np.any(n != np.round(n)):
        raise ValueError("need integer counts with 0 <= positives <= trials")
    x = np.asarray(logit_p, float)
    with np.errstate(invalid="ignore"):
        out = _binom_logcoef(k, n) + np.where(k > 0, k * special.log_expit(x), 0.0) \
            + np.where(n - k > 0, (n - k) * special.log_expit(-x), 0.0)
    return out


# ------------------------------------------------------------------ hazards


def _cause(k) -> int:
    if isinstance(k, str):
        if k.upper() not in CAUSES:
            raise ValueError(f"unknown cause {k!r}")
        return CAUSES[k.upper()]
    if k not in (PRG, TRT):
        raise ValueError(f"unknown cause {k!r}")
    return int(k)


@dataclass(frozen=True, eq=False)
class HazardDesign:
    """Basis evaluations needed by the hazard at a set of times."""

    t: np.ndarray
    G: np.ndarray
    C: np.ndarray
    C_lag: np.ndarray

    @classmethod
    def at(cls, t, spec: ModelSpec) -> "HazardDesign":
        t = np.atleast_1d(np.asarray(t, dtype=float)).ravel()
        return cls(t, bspline_design(t, spec.h0_knots), ncs_design(t, spec.ncs_knots),
                   ncs_design(t - 1.0, spec.ncs_knots))


def _eta(k: int, d: HazardDesign, params: ModelParameters, u, log_density, agec) -> np.ndarray:
    """Log hazard of cause ``k`` at the design times; broadcasts over draws."""
    u = np.asarray(u, float)
    m = _psa_mean(d.C, params.beta, u, agec)
    m_lag = _psa_mean(d.C_lag, params.beta, u, agec)
    eta = np.einsum("na,...a->...n", d.G, params.gamma_h0[..., k, :])
    eta = eta + (params.gamma[..., k] * log_density)[..., None]
    eta = eta + params.alpha[..., k, 0, None] * m + params.alpha[..., k, 1, None] * (m - m_lag)
    if params.alpha.shape[-1] > 2:
        eta = eta + params.alpha[..., k, 2, None] * _cr_mean(d.t, params.beta, u)
    return eta


def log_hazard(k, t, params: ModelParameters, u, covariates, spec: ModelSpec):
    """``log h_k(t)`` for one subject (``t`` scalar or array)."""
    k = _cause(k)
    t_arr = np.asarray(t, dtype=float)
    eta = _eta(k, HazardDesign.at(t_arr, spec), params, u, np.log(covariates.psa_density),
               covariates.age - AGE_CENTER)
    return eta.reshape(eta.shape[:-1] + t_arr.shape) if t_arr.ndim else eta[..., 0]


def hazard(k, t, params, u, covariates, spec):
    return np.exp(log_hazard(k, t, params, u, covariates, spec))


def _cumhaz_batch(k: int, lower, upper, params, u, covariates, spec) -> np.ndarray:
    rule = IntervalRule(lower, upper)
    d = HazardDesign.at(rule.nodes, spec)
    h = np.exp(_eta(k, d, params, u, np.log(covariates.psa_density), covariates.age - AGE_CENTER))
    return rule.integrate(h)


def cumulative_hazard(k, a, b, params: ModelParameters, u, covariates, spec: ModelSpec):
    """``∫_a^b h_k(v) dv`` by 15-point Gauss-Kronrod (one panel per year beyond 2 years).

    ``a`` and ``b`` may be arrays of the same shape.
    """
    k = _cause(k)
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    if np.any(a_arr > b_arr):
        raise ValueError("cumulative_hazard needs a <= b")
    out = _cumhaz_batch(k, a_arr.ravel(), b_arr.ravel(), params, u, covariates, spec)
    return out.reshape(out.shape[:-1] + a_arr.shape) if a_arr.ndim else out[..., 0]


def _outer_nodes(a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
    edges = panel_edges(a, b)
    x, w = gk15_nodes(edges[:-1], edges[1:])
    return x.ravel(), w.ravel()


def loglik_survival(patient: PatientRecord, params: ModelParameters, u, spec: ModelSpec):
    """Log of the interval-censored competing-risk survival contribution."""
    ev, cov = patient.event, patient.covariates
    t_minus, t_upper = ev.t_prg_minus, ev.t_upper
    H_p0 = cumulative_hazard(PRG, 0.0, t_minus, params, u, cov, spec)
    H_t = cumulative_hazard(TRT, 0.0, t_upper, params, u, cov, spec)
    if ev.delta == 0:
        return -H_p0 - H_t
    if ev.delta == 2:
        return log_hazard(TRT, t_upper, params, u, cov, spec) - H_p0 - H_t
    s, w = _outer_nodes(t_minus, t_upper)
    H_ps = H_p0[..., None] + cumulative_hazard(PRG, np.full_like(s, t_minus), s, params, u, cov, spec) \
        if np.ndim(H_p0) else H_p0 + cumulative_hazard(PRG, np.full_like(s, t_minus), s, params, u, cov, spec)
    log_terms = np.log(w) + log_hazard(PRG, s, params, u, cov, spec) - H_ps
    return special.logsumexp(log_terms, axis=-1) - H_t


def loglik_longitudinal(patient: PatientRecord, params: ModelParameters, u, spec: ModelSpec):
    """Sum of PSA (and, under ICJM 2, core-ratio) observation log densities."""
    t, v = patient.psa()
    total = 0.0
    if t.size:
        C = ncs_design(t, spec.ncs_knots)
        m = _psa_mean(C, params.beta, np.asarray(u, float), patient.covariates.age - AGE_CENTER)
        total = total + np.sum(loglik_psa_obs(v, m, np.asarray(params.tau_eps)[..., None]), axis=-1)
    tc, k, n = patient.core_ratio()
    if tc.size:
        if spec.variant is not Variant.ICJM2:
            raise VariantError("core-ratio observations need the ICJM 2 variant")
        total = total + np.sum(loglik_cr_obs(k, n, _cr_mean(tc, params.beta, np.asarray(u, float))), axis=-1)
    return total


def log_mvn_density(u, Omega):
    """Zero-mean multivariate normal log density; broadcasts over leading axes."""
    u = np.asarray(u, float)
    L = np.linalg.cholesky(Omega)
    z = np.linalg.solve(L, u[..., None])[..., 0]
    p = u.shape[-1]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (p * np.log(2 * np.pi) + logdet + np.sum(z * z, axis=-1))


def loglik_joint(patient: PatientRecord, params: ModelParameters, u, spec: ModelSpec):
    """Longitudinal + survival + random-effects log density for one subject."""
    return (loglik_longitudinal(patient, params, u, spec) + loglik_survival(patient, params, u, spec)
            + log_mvn_density(u, params.Omega))


# ------------------------------------------------------------------- priors


def _gamma_logpdf(x, shape, rate):
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(rate) - special.gammaln(shape) + (shape - 1) * np.log(x) - rate * x
    return np.where(x > 0, out, -np.inf)


def _normal_logpdf(x, var):
    x = np.asarray(x, float)
    return -0.5 * (np.log(2 * np.pi * var) + x * x / var)


def log_iw_density(X, df: float, scale) -> float:
    """Inverse-Wishart log density ``IW(df, scale)`` at ``X``.

    Returns ``-inf`` when ``X`` is not symmetric positive definite.
    """
    X = np.asarray(X, float)
    scale = np.asarray(scale, float)
    p = X.shape[0]
    if not np.allclose(X, X.T):
        return -np.inf
    try:
        Lx = np.linalg.cholesky(X)
    except np.linalg.LinAlgError:
        return -np.inf
    Ls = np.linalg.cholesky(scale)
    logdet_x = 2.0 * np.sum(np.log(np.diag(Lx)))
    logdet_s = 2.0 * np.sum(np.log(np.diag(Ls)))
    Xinv = np.linalg.inv(X)
    return float(0.5 * df * logdet_s - 0.5 * df * p * np.log(2.0) - special.multigammaln(0.5 * df, p)
                 - 0.5 * (df + p + 1) * logdet_x - 0.5 * np.trace(scale @ Xinv))


def log_pspline_prior(gamma_h0_k, tau, penalty: PenaltyMatrix):
    """Normalized ``N(0, (tau M)^-1)`` density of one cause's B-spline coefficients."""
    if not tau > 0:
        return -np.inf
    rho = penalty.rank
    _, logdet = np.linalg.slogdet(penalty.matrix)
    return (0.5 * rho * np.log(tau) + 0.5 * logdet - 0.5 * rho * np.log(2 * np.pi)
            - 0.5 * tau * penalty.quadratic_form(gamma_h0_k))


def log_prior(params: ModelParameters, spec: ModelSpec) -> float:
    """Log prior density; ``-inf`` outside the support."""
    pr = spec.priors
    if not (params.tau_eps > 0 and params.tau_u > 0 and np.all(params.tau_h0 > 0)):
        return -np.inf
    total = float(np.sum(_normal_logpdf(params.beta, pr.normal_var)))
    total += float(np.sum(_normal_logpdf(params.gamma, pr.normal_var)))
    total += float(np.sum(_normal_logpdf(params.alpha, pr.normal_var)))
    total += float(_gamma_logpdf(params.tau_eps, *pr.tau_eps))
    for k in (PRG, TRT):
        total += float(_gamma_logpdf(params.tau_h0[k], *pr.tau_h0))
        total += float(log_pspline_prior(params.gamma_h0[k], params.tau_h0[k], spec.penalty))
    n_u = spec.n_u
    total += log_iw_density(params.Omega, n_u + 1, (pr.iw_scale / params.tau_u) * np.eye(n_u))
    total += float(_gamma_logpdf(params.tau_u, *pr.tau_u))
    return total


# --------------------------------------------------------- cohort evaluator


class _NodeSet:
    """Hazard design for one cause at flattened nodes, with owning subject."""

    def __init__(self, t: np.ndarray, owner: np.ndarray, spec: ModelSpec):
        self.d = HazardDesign.at(t, spec)
        self.owner = owner.astype(np.intp)

    def features(self, params: ModelParameters, b: np.ndarray, log_density: np.ndarray,
                 agec: np.ndarray) -> np.ndarray:
        """Columns of the linear predictor in block order ``(gamma, alpha..., gamma_h0...)``."""
        d, o = self.d, self.owner
        bo = b[o]
        beta4 = params.beta[4]
        m = bo[:, 0] + np.einsum("np,np->n", d.C, bo[:, 1:4]) + beta4 * agec[o]
        m_lag = bo[:, 0] + np.einsum("np,np->n", d.C_lag, bo[:, 1:4]) + beta4 * agec[o]
        cols = [log_density[o], m, m - m_lag]
        if params.alpha.shape[-1] > 2:
            cols.append(bo[:, 4] + bo[:, 5] * d.t + bo[:, 6] * d.t**2)
        return np.column_stack(cols + [d.G])

    def eta(self, k: int, params: ModelParameters, b: np.ndarray, log_density: np.ndarray,
            agec: np.ndarray) -> np.ndarray:
        d, o = self.d, self.owner
        bo = b[o]
        beta4 = params.beta[4]

        def mean(C):
            return bo[:, 0] + np.einsum("np,np->n", C, bo[:, 1:4]) + beta4 * agec[o]

        m = mean(d.C)
        m_lag = mean(d.C_lag)
        eta = d.G @ params.gamma_h0[k] + params.gamma[k] * log_density[o]
        eta = eta + params.alpha[k, 0] * m + params.alpha[k, 1] * (m - m_lag)
        if params.alpha.shape[-1] > 2:
            cr = bo[:, 4] + bo[:, 5] * d.t + bo[:, 6] * d.t**2
            eta = eta + params.alpha[k, 2] * cr
        return eta


class CohortLikelihood:
    """Vectorized per-subject log-likelihood terms for a whole dataset.

    Quadrature nodes are laid out once at construction; evaluations only
    recompute hazards at those nodes. Random effects are passed as an
    ``(n_subjects, n_u)`` array.
    """

    def __init__(self, ds: Dataset, spec: ModelSpec):
        self.spec = spec
        self.n = n = len(ds)
        self.ids = ds.ids
        self.agec = np.array([p.covariates.age - AGE_CENTER for p in ds])
        self.log_density = np.log([p.covariates.psa_density for p in ds])
        self.delta = ds.deltas()
        self.t_minus = np.array([p.event.t_prg_minus for p in ds])
        self.t_upper = np.array([p.event.t_upper for p in ds])

        psa_idx, psa_t, psa_v, cr_idx, cr_t, cr_k, cr_n = [], [], [], [], [], [], []
        for i, p in enumerate(ds):
            t, v = p.psa()
            psa_idx.append(np.full(t.size, i))
            psa_t.append(t)
            psa_v.append(v)
            tc, kc, nc = p.core_ratio()
            cr_idx.append(np.full(tc.size, i))
            cr_t.append(tc)
            cr_k.append(kc)
            cr_n.append(nc)
        self.psa_idx = np.concatenate(psa_idx).astype(np.intp)
        self.psa_y = np.log2(np.concatenate(psa_v) + 1.0)
        self.psa_C = ncs_design(np.concatenate(psa_t), spec.ncs_knots).reshape(-1, 3)
        self.cr_idx = np.concatenate(cr_idx).astype(np.intp)
        self.cr_t = np.concatenate(cr_t)
        self.cr_k = np.concatenate(cr_k)
        self.cr_n = np.concatenate(cr_n)
        if self.cr_idx.size and spec.variant is not Variant.ICJM2:
            raise VariantError("core-ratio observations need the ICJM 2 variant")
        self.cr_logcoef = _binom_logcoef(self.cr_k, self.cr_n)
        self.n_psa = np.bincount(self.psa_idx, minlength=n)

        # PRG: [0, T-] for everyone; for delta = 1 also outer nodes s_j in
        # (T-, T+] and inner intervals [T-, s_j].
        self.rule_p0 = IntervalRule(np.zeros(n), self.t_minus)
        d1 = np.flatnonzero(self.delta == 1)
        s_list, w_list, own = [], [], []
        for i in d1:
            s, w = _outer_nodes(self.t_minus[i], self.t_upper[i])
            s_list.append(s)
            w_list.append(w)
            own.append(np.full(s.size, i))
        self.d1 = d1
        self.s_nodes = np.concatenate(s_list) if s_list else np.zeros(0)
        self.s_logw = np.log(np.concatenate(w_list)) if w_list else np.zeros(0)
        self.s_owner = np.concatenate(own).astype(np.intp) if own else np.zeros(0, np.intp)
        self.s_starts = np.flatnonzero(np.r_[True, np.diff(self.s_owner) != 0]) if self.s_owner.size else \
            np.zeros(0, np.intp)
        self.rule_ps = IntervalRule(self.t_minus[self.s_owner], self.s_nodes)
        np_a, np_b = self.rule_p0.nodes.size, self.rule_ps.nodes.size
        self._p_slices = (slice(0, np_a), slice(np_a, np_a + np_b), slice(np_a + np_b, None))
        self.nodes_p = _NodeSet(
            np.concatenate([self.rule_p0.nodes, self.rule_ps.nodes, self.s_nodes]),
            np.concatenate([self.rule_p0.owner, self.s_owner[self.rule_ps.owner], self.s_owner]), spec)

        # TRT: [0, T_upper] for everyone; point T_trt for delta = 2.
        self.rule_t0 = IntervalRule(np.zeros(n), self.t_upper)
        self.d2 = np.flatnonzero(self.delta == 2)
        nt_a = self.rule_t0.nodes.size
        self._t_slices = (slice(0, nt_a), slice(nt_a, None))
        self.nodes_t = _NodeSet(np.concatenate([self.rule_t0.nodes, self.t_upper[self.d2]]),
                                np.concatenate([self.rule_t0.owner, self.d2]), spec)

    # random-effects-aware coefficient matrix b = beta[ranef] + u
    def _b(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        b = np.empty_like(u)
        b[:, :4] = params.beta[:4] + u[:, :4]
        if u.shape[1] > 4:
            b[:, 4:] = params.beta[5:8] + u[:, 4:]
        return b

    def longitudinal(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        """Per-subject longitudinal log-likelihood."""
        b = self._b(params, u)
        i = self.psa_idx
        m = b[i, 0] + np.einsum("np,np->n", self.psa_C, b[i, 1:4]) + params.beta[4] * self.agec[i]
        out = np.bincount(i, weights=_t3_logpdf(self.psa_y - m, params.tau_eps), minlength=self.n)
        if self.cr_idx.size:
            j = self.cr_idx
            x = b[j, 4] + b[j, 5] * self.cr_t + b[j, 6] * self.cr_t**2
            ll = self.cr_logcoef + self.cr_k * special.log_expit(x) + (self.cr_n - self.cr_k) * special.log_expit(-x)
            out += np.bincount(j, weights=ll, minlength=self.n)
        return out

    def psa_residuals(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        b = self._b(params, u)
        i = self.psa_idx
        return self.psa_y - (b[i, 0] + np.einsum("np,np->n", self.psa_C, b[i, 1:4]) + params.beta[4] * self.agec[i])

    def hazards(self, k: int, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        """Hazard of cause ``k`` at that cause's quadrature nodes."""
        b = self._b(params, u)
        ns = self.nodes_p if k == PRG else self.nodes_t
        return np.exp(ns.eta(k, params, b, self.log_density, self.agec))

    def block_information(self, k: int, params: ModelParameters, u: np.ndarray, h: np.ndarray) -> np.ndarray:
        """Expected information ``∫ h x x'`` of cause ``k``'s linear-predictor block.

        ``h`` are the cause's hazards at its nodes. Progression uses the
        intervals ``[0, T-]`` plus the censoring windows, treatment ``[0, T]``.
        """
        b = self._b(params, u)
        if k == PRG:
            X = self.nodes_p.features(params, b, self.log_density, self.agec)
            pa, _, pc = self._p_slices
            rows = np.r_[np.arange(pa.start, pa.stop), np.arange(pc.start, pc.start + self.s_nodes.size)]
            w = np.r_[self.rule_p0.weights, np.exp(self.s_logw)]
        else:
            X = self.nodes_t.features(params, b, self.log_density, self.agec)
            ta, _ = self._t_slices
            rows = np.arange(ta.start, ta.stop)
            w = self.rule_t0.weights
        Xr = X[rows]
        return (Xr * (w * h[rows])[:, None]).T @ Xr

    def survival(self, h_p: np.ndarray, h_t: np.ndarray) -> np.ndarray:
        """Per-subject survival log-likelihood from node hazards."""
        pa, pb, pc = self._p_slices
        ta, tb = self._t_slices
        H_p0 = self.rule_p0.integrate(h_p[pa])
        H_t = self.rule_t0.integrate(h_t[ta])
        out = -H_p0 - H_t
        if self.d2.size:
            out[self.d2] += np.log(h_t[tb])
        if self.d1.size:
            o = self.s_owner
            H_ps = H_p0[o] + self.rule_ps.integrate(h_p[pb])
            terms = self.s_logw + np.log(h_p[pc]) - H_ps
            mx = np.maximum.reduceat(terms, self.s_starts)
            lse = mx + np.log(np.add.reduceat(np.exp(terms - np.repeat(mx, np.diff(np.r_[self.s_starts, o.size]))),
                                              self.s_starts))
            out[self.d1] = lse - H_t[self.d1]
        return out

    def survival_loglik(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        return self.survival(self.hazards(PRG, params, u), self.hazards(TRT, params, u))

    def random_effects(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        return log_mvn_density(u, params.Omega)

    def per_subject(self, params: ModelParameters, u: np.ndarray) -> np.ndarray:
        return self.longitudinal(params, u) + self.survival_loglik(params, u) + self.random_effects(params, u)

    def log_posterior(self, params: ModelParameters, u: np.ndarray) -> float:
        lp = log_prior(params, self.spec)
        if not np.isfinite(lp):
            return -np.inf
        return float(np.sum(self.per_subject(params, u)) + lp)
