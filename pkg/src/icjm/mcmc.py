"""Adaptive Metropolis-within-Gibbs estimation of the joint model.

A sweep updates, in order:

1. all fixed effects of the longitudinal submodels, drawn exactly given
   the subject coefficients ``b_i = X_i beta + u_i`` (centered
   parameterization; the age effect enters the subject intercept);
2. per cause, the block ``(gamma_k, alpha_k, gamma_h0_k)`` by random-walk
   Metropolis with an adapted proposal covariance;
3. ``tau_eps`` by random-walk Metropolis on ``log tau_eps``;
4. every subject's random effects, each with its own adapted proposal;
5. ``tau_h0_k``, ``Omega`` and ``tau_u`` from their full conditionals.

Proposal scales follow a Robbins-Monro recursion during burn-in and are
frozen afterwards.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import Dataset
from .likelihood import (PRG, TRT, CohortLikelihood, ModelParameters, ModelSpec, _gamma_logpdf, _normal_logpdf,
                         log_prior, log_pspline_prior, stack_parameters, T_DF)
from .splines import PenaltyMatrix, ncs_design

__all__ = [
    "MCMCConfig",
    "AdaptiveScale",
    "rm_adapt",
    "garthwaite_constant",
    "gibbs_tau_h0",
    "gibbs_omega",
    "gibbs_tau_u",
    "gelman_rubin",
    "adaptive_metropolis",
    "ChainState",
    "PosteriorSamples",
    "fit",
    "initial_parameters",
    "save_posterior",
    "load_posterior",
    "ArchiveError",
    "DivergenceError",
    "ARCHIVE_FORMAT",
]

log = logging.getLogger(__name__)

ARCHIVE_FORMAT = "icjm-posterior/1"


class DivergenceError(RuntimeError):
    """A chain stopped moving or produced a non-finite log posterior."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ArchiveError(ValueError):
    """Posterior archive is unreadable or has an unsupported version."""


@dataclass(frozen=True)
class MCMCConfig:
    n_iterations: int = 4000
    n_burnin: int = 2000
    thinning: int = 2
    n_chains: int = 3
    seed: int = 2024
    target_scalar: float = 0.44
    target_vector: float = 0.234
    rm_exponent: float = 1.0
    rm_offset: float = 10.0
    divergence_window: int = 1000
    init_jitter: float = 0.1
    hazard_substeps: int = 2
    shape_refresh: int = 100

    def __post_init__(self):
        if self.n_iterations <= self.n_burnin:
            raise ValueError("n_iterations must exceed n_burnin")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        for t in (self.target_scalar, self.target_vector):
            if not 0.0 < t < 1.0:
                raise ValueError("target acceptance must lie in (0, 1)")

    @classmethod
    def paper(cls, seed: int = 2024) -> "MCMCConfig":
        """Reference scale: 3 chains of 10000 iterations, thinning 10."""
        return cls(n_iterations=10000, n_burnin=5000, thinning=10, n_chains=3, seed=seed)

    @property
    def draws_per_chain(self) -> int:
        return len(range(self.n_burnin, self.n_iterations, self.thinning))

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- adaptation


def garthwaite_constant(target: float, dim: int = 1) -> float:
    """Step-size constant of the Robbins-Monro scale search for a given target."""
    a = -stats.norm.ppf(target / 2.0)
    return ((1.0 - 1.0 / dim) * math.sqrt(2.0 * math.pi) * math.exp(a * a / 2.0) / (2.0 * a)
            + 1.0 / (dim * target * (1.0 - target)))


@dataclass
class AdaptiveScale:
    """Random-walk proposal: ``exp(log_scale) * chol @ z``.

    ``chol`` is the Cholesky factor of the proposal shape (identity for a
    scalar block). ``mean``/``scatter`` accumulate block values for the
    empirical covariance of vector blocks.
    """

    target: float
    dim: int = 1
    log_scale: float = 0.0
    step: int = 0
    chol: np.ndarray = None
    exponent: float = 1.0
    offset: float = 10.0
    accepted: int = 0
    proposed: int = 0
    window_accepted: int = 0
    n_seen: int = 0
    mean: np.ndarray = None
    scatter: np.ndarray = None

    def __post_init__(self):
        if self.chol is None:
            self.chol = np.eye(self.dim)
        self.constant = garthwaite_constant(self.target, self.dim)

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return x + self.scale * (self.chol @ rng.standard_normal(self.dim))

    def record(self, accepted: bool) -> None:
        self.proposed += 1
        self.accepted += int(accepted)
        self.window_accepted += int(accepted)

    def observe(self, x: np.ndarray) -> None:
        """Welford accumulation of block values (burn-in only)."""
        x = np.atleast_1d(x)
        self.n_seen += 1
        if self.mean is None:
            self.mean = x.astype(float).copy()
            self.scatter = np.zeros((self.dim, self.dim))
            return
        d = x - self.mean
        self.mean += d / self.n_seen
        self.scatter += np.outer(d, x - self.mean)

    def refresh_shape(self, ridge: float = 1e-8) -> bool:
        """Replace the proposal shape by the empirical covariance when enough values were seen."""
        if self.dim == 1 or self.n_seen < 10 * self.dim:
            return False
        cov = self.scatter / (self.n_seen - 1)
        cov = cov + ridge * max(np.trace(cov) / self.dim, 1e-12) * np.eye(self.dim)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            return False
        self.chol = chol * (2.38 / math.sqrt(self.dim))
        return True

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


def rm_adapt(scale: AdaptiveScale, accepted, target: float | None = None) -> AdaptiveScale:
    """One Robbins-Monro step on ``log_scale`` toward ``target`` acceptance."""
    target = scale.target if target is None else target
    if not 0.0 < target < 1.0:
        raise ValueError("target must lie in (0, 1)")
    scale.step += 1
    gain = scale.constant / (scale.step + scale.offset) ** scale.exponent
    scale.log_scale += gain * (float(accepted) - target)
    return scale


# ----------------------------------------------------- conjugate updates


def gibbs_tau_h0(gamma_h0_k, penalty: PenaltyMatrix, rng: np.random.Generator, prior=(5.0, 0.5)) -> float:
    """Draw the P-spline precision from ``Gamma(a + rank/2, b + gamma' M gamma / 2)``."""
    a, b = prior
    rate = b + 0.5 * float(penalty.quadratic_form(gamma_h0_k))
    return float(rng.gamma(a + 0.5 * penalty.rank, 1.0 / rate))


def gibbs_omega(u_all, tau_u: float, n_u: int, rng: np.random.Generator, iw_scale: float = 4.0) -> np.ndarray:
    """Draw ``Omega ~ IW(n_u + 1 + n, (iw_scale / tau_u) I + sum u u')``."""
    u_all = np.atleast_2d(np.asarray(u_all, float))
    if u_all.shape[0] == 0:
        raise ValueError("need at least one subject")
    scale = (iw_scale / tau_u) * np.eye(n_u) + u_all.T @ u_all
    try:
        np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as err:
        raise np.linalg.LinAlgError("singular inverse-Wishart scale matrix") from err
    df = n_u + 1 + u_all.shape[0]
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    draw = np.atleast_2d(draw)
    return 0.5 * (draw + draw.T)


def gibbs_tau_u(Omega, rng: np.random.Generator, prior=(0.5, 0.01), iw_scale: float = 4.0) -> float:
    """Draw ``tau_u`` given ``Omega``.

    With ``Omega ~ IW(p + 1, (iw_scale / tau_u) I)`` and a ``Gamma(a, b)`` prior,
    the full conditional is generalized inverse Gaussian,
    ``tau^(a - p nu / 2 - 1) exp(-b tau - (iw_scale / 2) tr(Omega^-1) / tau)``.
    """
    Omega = np.asarray(Omega, float)
    p = Omega.shape[0]
    nu = p + 1
    a, b = prior
    lam = a - 0.5 * p * nu
    chi = iw_scale * float(np.trace(np.linalg.inv(Omega)))   # coefficient of 1/(2 tau)
    psi = 2.0 * b                                            # coefficient of tau/2
    y = stats.geninvgauss.rvs(lam, math.sqrt(chi * psi), random_state=rng)
    return float(math.sqrt(chi / psi) * y)


# -------------------------------------------------------------- diagnostics


def gelman_rubin(chains) -> np.ndarray:
    """Split R-hat for each trailing parameter column.

    ``chains`` has shape ``(m, n)`` or ``(m, n, k)`` with ``m >= 2``.
    """
    x = np.asarray(chains, float)
    if x.ndim < 2 or x.shape[0] < 2:
        raise ValueError("gelman_rubin needs at least two chains")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    half = x.shape[1] // 2
    if half < 2:
        raise ValueError("chains too short for split R-hat")
    split = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = split.shape[1]
    means = split.mean(axis=1)
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r = np.where(W == 0, np.where(B == 0, 1.0, np.inf), r)
    return r[..., 0] if squeeze else r


def effective_sample_size(x) -> float:
    """Initial-positive-sequence ESS of a single chain."""
    x = np.asarray(x, float)
    n = x.size
    x = x - x.mean()
    var = x.var()
    if n < 4 or var == 0:
        return float(n)
    f = np.fft.rfft(x, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    total = 0.0
    for k in range(1, n - 1, 2):
        pair = acf[k] + acf[k + 1]
        if pair < 0:
            break
        total += pair
    return float(n / (1.0 + 2.0 * total))


# ----------------------------------------------------------- generic sampler


def adaptive_metropolis(log_target, x0, n_iter: int, n_burnin: int, rng: np.random.Generator,
                        target: float | None = None, offset: float = 10.0, init_scale: float = 1.0):
    """Random-walk Metropolis on a single vector block with burn-in adaptation.

    Returns ``(draws, scale)`` with the post-burn-in draws.
    """
    x = np.atleast_1d(np.asarray(x0, float)).copy()
    dim = x.size
    if target is None:
        target = 0.44 if dim == 1 else 0.234
    sc = AdaptiveScale(target, dim, log_scale=math.log(init_scale), offset=offset)
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise DivergenceError("non-finite log target at start")
    out = np.empty((n_iter - n_burnin, dim))
    for it in range(n_iter):
        prop = sc.propose(x, rng)
        lp_new = float(log_target(prop))
        acc = math.log(rng.uniform()) < lp_new - lp
        if acc:
            x, lp = prop, lp_new
        sc.record(acc)
        if it < n_burnin:
            rm_adapt(sc, acc)
            sc.observe(x)
            if dim > 1 and (it + 1) % 200 == 0:
                sc.refresh_shape()
        else:
            out[it - n_burnin] = x
    return out, sc


# ------------------------------------------------------------- the sampler


@dataclass
class ChainState:
    params: ModelParameters
    u: np.ndarray
    scales: dict = field(default_factory=dict)
    u_log_scale: np.ndarray = None
    u_step: int = 0
    u_accepted: np.ndarray = None
    u_window_accepted: int = 0


def _block_vector(params: ModelParameters, k: int) -> np.ndarray:
    return np.concatenate([[params.gamma[k]], params.alpha[k], params.gamma_h0[k]])


def _set_block(params: ModelParameters, k: int, v: np.ndarray) -> None:
    na = params.alpha.shape[1]
    params.gamma[k] = v[0]
    params.alpha[k] = v[1:1 + na]
    params.gamma_h0[k] = v[1 + na:]


def _ranef_beta_index(spec: ModelSpec) -> np.ndarray:
    return np.array([0, 1, 2, 3] if spec.n_u == 4 else [0, 1, 2, 3, 5, 6, 7])


def initial_parameters(ds: Dataset, spec: ModelSpec) -> ModelParameters:
    """Deterministic starting values.

    Fixed effects from least squares of ``log2(PSA + 1)`` on the spline
    basis and centered age, ``Omega = I``, constant log baseline hazards at
    the crude event rates, and zero associations.
    """
    rows, ys = [], []
    for p in ds:
        t, v = p.psa()
        if t.size:
            C = ncs_design(t, spec.ncs_knots)
            rows.append(np.column_stack([np.ones(t.size), C, np.full(t.size, p.covariates.age - 62.0)]))
            ys.append(np.log2(v + 1.0))
    X = np.vstack(rows)
    y = np.concatenate(ys)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    beta = np.zeros(spec.n_beta)
    beta[:5] = coef
    if spec.n_beta > 5:
        beta[5] = -2.0
    follow = sum(p.event.t_upper for p in ds)
    d = ds.deltas()
    rate = [max(np.sum(d == 1), 1) / follow, max(np.sum(d == 2), 1) / follow]
    return ModelParameters(
        beta=beta, tau_eps=1.0 / max(np.var(resid), 1e-3), Omega=np.eye(spec.n_u), tau_u=1.0,
        gamma_h0=np.array([np.full(spec.n_h0, math.log(r)) for r in rate]),
        tau_h0=np.array([10.0, 10.0]), gamma=np.zeros(2), alpha=np.zeros((2, spec.n_alpha)))


class _Sampler:
    """One chain. Log-likelihood pieces are cached and refreshed per block."""

    def __init__(self, coh: CohortLikelihood, spec: ModelSpec, cfg: MCMCConfig, init: ModelParameters,
                 rng: np.random.Generator):
        self.coh = coh
        self.spec = spec
        self.cfg = cfg
        self.rng = rng
        self.n = coh.n
        idx = _ranef_beta_index(spec)
        self.beta_design = np.zeros((self.n, spec.n_u, spec.n_beta))
        self.beta_design[:, np.arange(spec.n_u), idx] = 1.0
        self.beta_design[:, 0, 4] = coh.agec
        p = init
        self.state = ChainState(p, np.zeros((self.n, spec.n_u)))
        self.state.u_log_scale = np.zeros(self.n)
        self.state.u_accepted = np.zeros(self.n, dtype=np.int64)
        off = cfg.rm_offset, cfg.rm_exponent
        dim_block = 1 + spec.n_alpha + spec.n_h0
        block_chol = np.diag(np.r_[0.1, np.full(spec.n_alpha, 0.1), np.full(spec.n_h0, 0.1)])
        self.state.scales = {
            "log_tau_eps": AdaptiveScale(cfg.target_scalar, 1, math.log(0.05), offset=off[0], exponent=off[1]),
            "hazard_PRG": AdaptiveScale(cfg.target_vector, dim_block, 0.0, chol=block_chol.copy(),
                                        offset=off[0], exponent=off[1]),
            "hazard_TRT": AdaptiveScale(cfg.target_vector, dim_block, 0.0, chol=block_chol.copy(),
                                        offset=off[0], exponent=off[1]),
        }
        self.u_constant = garthwaite_constant(cfg.target_vector, spec.n_u)
        self._psa_design = np.column_stack([np.ones(coh.psa_idx.size), coh.psa_C])
        self._refresh_all()
        if not np.isfinite(self.log_posterior()):
            raise DivergenceError("non-finite log posterior at initialization")

    # cached pieces --------------------------------------------------------
    def _refresh_all(self) -> None:
        p, u = self.state.params, self.state.u
        self.ll_long = self.coh.longitudinal(p, u)
        self.h = [self.coh.hazards(PRG, p, u), self.coh.hazards(TRT, p, u)]
        self.ll_surv = self.coh.survival(*self.h)

    def log_posterior(self) -> float:
        p = self.state.params
        return float(np.sum(self.ll_long) + np.sum(self.ll_surv) + np.sum(self.coh.random_effects(p, self.state.u))
                     + log_prior(p, self.spec))

    def _mh(self, name: str, log_ratio: float, adapt: bool) -> bool:
        sc = self.state.scales[name]
        acc = bool(math.log(self.rng.uniform()) < log_ratio) if np.isfinite(log_ratio) else False
        sc.record(acc)
        if adapt:
            rm_adapt(sc, acc)
        return acc

    # blocks --------------------------------------------------------------
    def update_beta(self) -> None:
        """Exact draw of all fixed effects given the subject coefficients ``b_i = X_i beta + u_i``."""
        p, u = self.state.params, self.state.u
        X = self.beta_design
        b = np.einsum("nrj,j->nr", X, p.beta) + u
        Oinv = np.linalg.inv(p.Omega)
        XtO = np.einsum("nrj,rs->njs", X, Oinv)
        prec = np.einsum("njs,nsk->jk", XtO, X) + np.eye(p.beta.size) / self.spec.priors.normal_var
        L = np.linalg.cholesky(prec)
        mean = np.linalg.solve(prec, np.einsum("njs,ns->j", XtO, b))
        new = mean + np.linalg.solve(L.T, self.rng.standard_normal(p.beta.size))
        p.beta[:] = new
        self.state.u = b - np.einsum("nrj,j->nr", X, new)

    def _block_log_prior(self, k: int, v: np.ndarray) -> float:
        pr = self.spec.priors
        na = self.spec.n_alpha
        return float(np.sum(_normal_logpdf(v[:1 + na], pr.normal_var))
                     + log_pspline_prior(v[1 + na:], self.state.params.tau_h0[k], self.spec.penalty))

    def update_hazard_block(self, k: int, adapt: bool) -> None:
        name = "hazard_PRG" if k == PRG else "hazard_TRT"
        sc = self.state.scales[name]
        p = self.state.params
        old = _block_vector(p, k)
        prop = sc.propose(old, self.rng)
        _set_block(p, k, prop)
        with np.errstate(over="ignore"):
            hk = self.coh.hazards(k, p, self.state.u)
        h = list(self.h)
        h[k] = hk
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll_surv = self.coh.survival(*h)
        ratio = (np.sum(ll_surv) - np.sum(self.ll_surv) + self._block_log_prior(k, prop)
                 - self._block_log_prior(k, old))
        if self._mh(name, ratio, adapt):
            self.h, self.ll_surv = h, ll_surv
        else:
            _set_block(p, k, old)

    def refresh_block_shapes(self, reset: bool = False) -> None:
        """Proposal shape of each hazard block from its conditional information."""
        p = self.state.params
        pr = self.spec.priors
        na = self.spec.n_alpha
        for k, name in ((PRG, "hazard_PRG"), (TRT, "hazard_TRT")):
            info = self.coh.block_information(k, p, self.state.u, self.h[k])
            prior = np.zeros_like(info)
            prior[np.arange(1 + na), np.arange(1 + na)] = 1.0 / pr.normal_var
            prior[1 + na:, 1 + na:] = p.tau_h0[k] * self.spec.penalty.matrix
            prec = info + prior
            try:
                cov = np.linalg.inv(prec)
                chol = np.linalg.cholesky(0.5 * (cov + cov.T))
            except np.linalg.LinAlgError:
                continue
            sc = self.state.scales[name]
            sc.chol = chol * (2.38 / math.sqrt(sc.dim))
            if reset:
                sc.log_scale = 0.0

    def update_tau_eps(self, adapt: bool) -> None:
        p = self.state.params
        sc = self.state.scales["log_tau_eps"]
        old = p.tau_eps
        prop = old * math.exp(sc.scale * self.rng.standard_normal())
        p.tau_eps = prop
        ll_long = self.coh.longitudinal(p, self.state.u)
        a, b = self.spec.priors.tau_eps
        ratio = (np.sum(ll_long) - np.sum(self.ll_long) + _gamma_logpdf(prop, a, b) - _gamma_logpdf(old, a, b)
                 + math.log(prop) - math.log(old))
        if self._mh("log_tau_eps", float(ratio), adapt):
            self.ll_long = ll_long
        else:
            p.tau_eps = old

    def _u_proposal_chol(self) -> np.ndarray:
        """Per-subject Cholesky factors of an approximate conditional covariance of ``u``."""
        p = self.state.params
        coh = self.coh
        nu = self.spec.n_u
        info_scale = p.tau_eps * (T_DF + 1.0) / (T_DF + 3.0)
        Z = self._psa_design
        outer = np.einsum("ni,nj->nij", Z, Z)
        info = np.zeros((self.n, nu, nu))
        np.add.at(info[:, :4, :4], coh.psa_idx, info_scale * outer)
        if nu > 4 and coh.cr_idx.size:
            T = np.column_stack([np.ones(coh.cr_t.size), coh.cr_t, coh.cr_t**2])
            np.add.at(info[:, 4:, 4:], coh.cr_idx, 0.1 * coh.cr_n[:, None, None] * np.einsum("ni,nj->nij", T, T))
        prec = info + np.linalg.inv(p.Omega)
        cov = np.linalg.inv(prec)
        return np.linalg.cholesky(0.5 * (cov + np.swapaxes(cov, 1, 2)))

    def update_u(self, adapt: bool) -> None:
        st = self.state
        p = st.params
        nu = self.spec.n_u
        chol = self._u_proposal_chol()
        z = self.rng.standard_normal((self.n, nu))
        step = (np.exp(st.u_log_scale) * 2.38 / math.sqrt(nu))[:, None] * np.einsum("nij,nj->ni", chol, z)
        prop = st.u + step
        ll_long = self.coh.longitudinal(p, prop)
        with np.errstate(over="ignore"):
            h = [self.coh.hazards(PRG, p, prop), self.coh.hazards(TRT, p, prop)]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ll_surv = self.coh.survival(*h)
        re_new = self.coh.random_effects(p, prop)
        re_old = self.coh.random_effects(p, st.u)
        ratio = ll_long + ll_surv + re_new - self.ll_long - self.ll_surv - re_old
        ratio = np.where(np.isfinite(ratio), ratio, -np.inf)
        acc = np.log(self.rng.uniform(size=self.n)) < ratio
        st.u = np.where(acc[:, None], prop, st.u)
        st.u_accepted += acc
        st.u_window_accepted += int(acc.sum())
        if adapt:
            st.u_step += 1
            gain = self.u_constant / (st.u_step + self.cfg.rm_offset) ** self.cfg.rm_exponent
            st.u_log_scale += gain * (acc - self.cfg.target_vector)
        self._refresh_all()

    def update_conjugate(self) -> None:
        p = self.state.params
        pr = self.spec.priors
        for k in (PRG, TRT):
            p.tau_h0[k] = gibbs_tau_h0(p.gamma_h0[k], self.spec.penalty, self.rng, pr.tau_h0)
        p.Omega = gibbs_omega(self.state.u, p.tau_u, self.spec.n_u, self.rng, pr.iw_scale)
        p.tau_u = gibbs_tau_u(p.Omega, self.rng, pr.tau_u, pr.iw_scale)

    def sweep(self, adapt: bool) -> None:
        self.update_beta()
        for k in (PRG, TRT):
            for _ in range(self.cfg.hazard_substeps):
                self.update_hazard_block(k, adapt)
        self.update_tau_eps(adapt)
        self.update_u(adapt)
        self.update_conjugate()

    def check_window(self, it: int) -> None:
        stuck = [name for name, sc in self.state.scales.items() if sc.window_accepted == 0]
        if self.state.u_window_accepted == 0:
            stuck.append("u")
        if stuck:
            raise DivergenceError(f"no accepted proposals for {', '.join(stuck)} in the "
                                  f"{self.cfg.divergence_window} iterations before iteration {it + 1}",
                                  {"iteration": it + 1, "blocks": stuck})
        for sc in self.state.scales.values():
            sc.window_accepted = 0
        self.state.u_window_accepted = 0

    def run(self, chain: int, progress=None) -> list[ModelParameters]:
        cfg = self.cfg
        draws = []
        for it in range(cfg.n_iterations):
            burn = it < cfg.n_burnin
            self.sweep(adapt=burn)
            if burn and it % cfg.shape_refresh == 0:
                self.refresh_block_shapes(reset=it == 0)
            if (it + 1) % cfg.divergence_window == 0:
                self.check_window(it)
            if not burn and (it - cfg.n_burnin) % cfg.thinning == 0:
                self.state.params.validate()
                draws.append(self.state.params.copy())
            if progress is not None and (it + 1) % 500 == 0:
                progress(chain, it + 1)
        return draws

    def acceptance(self) -> dict:
        out = {name: sc.acceptance_rate for name, sc in self.state.scales.items()}
        out["u"] = float(np.mean(self.state.u_accepted) / self.cfg.n_iterations)
        return out


def _jitter(p: ModelParameters, rng: np.random.Generator, size: float) -> ModelParameters:
    q = p.copy()
    q.beta = q.beta + size * 0.5 * rng.standard_normal(q.beta.shape) * np.r_[1, 1, 1, 1, 0.02, np.ones(q.beta.size - 5)]
    q.gamma_h0 = q.gamma_h0 + size * rng.standard_normal(q.gamma_h0.shape)
    q.alpha = q.alpha + size * 0.5 * rng.standard_normal(q.alpha.shape)
    q.gamma = q.gamma + size * 0.5 * rng.standard_normal(q.gamma.shape)
    q.tau_eps = float(q.tau_eps * math.exp(size * rng.standard_normal()))
    return q


# ---------------------------------------------------------------- posterior


@dataclass(eq=False)
class PosteriorSamples:
    """Retained draws of all chains, concatenated in chain order."""

    draws: list
    chain: np.ndarray
    spec: ModelSpec
    diagnostics: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.chain = np.asarray(self.chain, dtype=int)
        if len(self.draws) != self.chain.size:
            raise ValueError("one chain label per draw")

    def __len__(self) -> int:
        return len(self.draws)

    @property
    def n_chains(self) -> int:
        return int(self.chain.max()) + 1 if self.chain.size else 0

    def stacked(self, idx=None) -> ModelParameters:
        idx = range(len(self.draws)) if idx is None else idx
        return stack_parameters([self.draws[i] for i in idx])

    def thin_to(self, L: int) -> ModelParameters:
        """``L`` draws at evenly spaced positions (all draws if fewer)."""
        if L >= len(self.draws):
            return self.stacked()
        idx = np.unique(np.round(np.linspace(0, len(self.draws) - 1, L)).astype(int))
        return self.stacked(idx)

    def scalar_table(self) -> tuple[list[str], np.ndarray]:
        names = list(self.draws[0].flat())
        values = np.array([[d.flat()[k] for k in names] for d in self.draws])
        return names, values

    def per_chain(self) -> tuple[list[str], np.ndarray]:
        """Draw table reshaped to ``(chains, draws_per_chain, n_params)``."""
        names, values = self.scalar_table()
        m = self.n_chains
        return names, values.reshape(m, -1, len(names))

    def summary(self) -> dict:
        names, values = self.scalar_table()
        lo, hi = np.percentile(values, [2.5, 97.5], axis=0)
        return {n: {"mean": float(values[:, i].mean()), "lower": float(lo[i]), "upper": float(hi[i])}
                for i, n in enumerate(names)}

    def posterior_mean(self) -> ModelParameters:
        st = self.stacked()
        return ModelParameters(**{k: np.mean(v, axis=0) for k, v in st.as_dict().items()})


def fit(ds: Dataset, spec: ModelSpec, cfg: MCMCConfig, *, init: ModelParameters | None = None,
        progress=None) -> PosteriorSamples:
    """Run ``cfg.n_chains`` chains sequentially and collect thinned post-burn-in draws.

    Chains use independent streams spawned from ``cfg.seed`` and start from
    jittered copies of :func:`initial_parameters` (or ``init``).
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    coh = CohortLikelihood(ds, spec)
    base = init if init is not None else initial_parameters(ds, spec)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_chains)
    draws, labels, acc = [], [], []
    for c, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        start = _jitter(base, rng, cfg.init_jitter)
        sampler = _Sampler(coh, spec, cfg, start, rng)
        chain_draws = sampler.run(c, progress)
        draws.extend(chain_draws)
        labels.extend([c] * len(chain_draws))
        acc.append(sampler.acceptance())
        log.info("chain %d done: acceptance %s", c, acc[-1])
    post = PosteriorSamples(draws, np.array(labels), spec, config=cfg.to_dict())
    diag = {"acceptance": acc}
    if cfg.n_chains >= 2:
        names, table = post.per_chain()
        rhat = gelman_rubin(table)
        diag["rhat"] = {n: float(r) for n, r in zip(names, rhat)}
    post.diagnostics = diag
    return post


# ------------------------------------------------------------------ archive


def save_posterior(post: PosteriorSamples, path) -> Path:
    """Write the versioned JSON archive (floats round-trip exactly)."""
    path = Path(path)
    st = post.stacked()
    doc = {
        "format": ARCHIVE_FORMAT,
        "spec": post.spec.to_dict(),
        "config": post.config,
        "chain": post.chain.tolist(),
        "draws": {k: np.asarray(v).tolist() for k, v in st.as_dict().items()},
        "diagnostics": post.diagnostics,
    }
    path.write_text(json.dumps(doc, sort_keys=True))
    return path


def load_posterior(path) -> PosteriorSamples:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ArchiveError(f"cannot read posterior archive {path}: {err}") from err
    if doc.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"unsupported posterior archive version {doc.get('format')!r}; "
                           f"expected {ARCHIVE_FORMAT!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    arrays = {k: np.asarray(v, dtype=float) for k, v in doc["draws"].items()}
    n = arrays["beta"].shape[0]
    draws = [ModelParameters(**{k: (float(v[i]) if v.ndim == 1 else v[i].copy()) for k, v in arrays.items()})
             for i in range(n)]
    return PosteriorSamples(draws, np.asarray(doc["chain"]), spec, doc.get("diagnostics", {}),
                            doc.get("config", {}))
