"""Synthetic active-surveillance cohorts generated from the ICJM 1 posterior means.

Each patient gets baseline covariates, random effects, competing event
times drawn by inverse transform on the cumulative hazard, quarterly PSA
values with Student-t noise, and a jittered biopsy schedule that
interval-censors progression.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize, stats

from .data import BaselineCovariates, Dataset, EventRecord, LongitudinalObservation, OutcomeKind, PatientRecord
from .likelihood import (AGE_CENTER, PRG, TRT, HazardDesign, ModelParameters, ModelSpec, Variant, _eta,
                         mean_psa)
from .quadrature import gk15_nodes
from .splines import KnotVector

__all__ = [
    "PRESET_PARAMETERS",
    "PRESET_SPEC",
    "SimulationParams",
    "SimulatedPatient",
    "GroundTruth",
    "simulate_event_times",
    "simulate_patient",
    "simulate_dataset",
    "event_proportions",
    "write_ground_truth",
    "read_ground_truth",
    "OBSERVED_PROPORTIONS",
    "TARGET_PROPORTIONS",
]

#: Event proportions (progression, treatment, censored) in percent.
TARGET_PROPORTIONS = (28.29, 7.92, 63.79)
#: The same summary for the real cohort; a reference column only.
OBSERVED_PROPORTIONS = (21.97, 10.44, 67.59)

PRESET_PARAMETERS = ModelParameters(
    beta=np.array([2.34, 0.28, 0.61, 0.95, 0.02]),
    tau_eps=47.40,
    Omega=np.array([
        [0.48, -0.04, -0.07, 0.02],
        [-0.04, 0.77, 0.46, -0.04],
        [-0.07, 0.46, 1.37, 1.36],
        [0.02, -0.04, 1.36, 2.54],
    ]),
    tau_u=1.0,
    gamma_h0=np.array([
        [-6.78, -4.72, -2.84, -1.65, -1.54, -1.79, -1.85, -1.75, -1.85, -2.04, -2.18, -2.32],
        [-5.76, -4.99, -4.43, -4.26, -4.36, -4.47, -4.60, -4.69, -4.78, -4.92, -5.08, -5.21],
    ]),
    tau_h0=np.array([1.0, 1.0]),
    gamma=np.array([0.50, 0.23]),
    alpha=np.array([[0.13, 3.01], [0.42, 2.62]]),
)

# Knots fixed by the pilot calibration in demos/calibrate_simulation.py.
PRESET_SPEC = ModelSpec(
    Variant.ICJM1,
    ncs_knots=KnotVector((1.71, 3.67), (0.0, 8.74)),
    h0_knots=KnotVector((1.73, 2.31, 2.69, 3.19, 3.76, 4.41, 5.14, 6.11), (0.0, 10.0)),
)

_MONTH = 1.0 / 12.0
_TWO_WEEKS = 14.0 / 365.25


@dataclass(frozen=True, eq=False)
class SimulationParams:
    """Generating model plus covariate generators and observation scheme."""

    model: ModelParameters = field(default_factory=lambda: PRESET_PARAMETERS.copy())
    spec: ModelSpec = PRESET_SPEC
    age_mean: float = 62.0
    age_sd: float = 7.0
    age_bounds: tuple = (45.0, 85.0)
    log_density_mean: float = -2.384
    log_density_sd: float = 0.726
    psa_interval: float = 0.25
    psa_jitter: float = _TWO_WEEKS
    biopsy_times: tuple = (1.0, 2.0, 4.0, 6.0, 8.0, 10.0)
    biopsy_jitter: float = _MONTH
    censor_range: tuple = (2.0, 10.0)
    horizon: float = 10.0
    noise: bool = True
    treatment: bool = True

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(), "spec": self.spec.to_dict(), "age_mean": self.age_mean,
            "age_sd": self.age_sd, "age_bounds": list(self.age_bounds), "log_density_mean": self.log_density_mean,
            "log_density_sd": self.log_density_sd, "psa_interval": self.psa_interval,
            "psa_jitter": self.psa_jitter, "biopsy_times": list(self.biopsy_times),
            "biopsy_jitter": self.biopsy_jitter, "censor_range": list(self.censor_range),
            "horizon": self.horizon, "noise": self.noise, "treatment": self.treatment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationParams":
        kw = dict(d)
        kw["model"] = ModelParameters.from_dict(d["model"])
        kw["spec"] = ModelSpec.from_dict(d["spec"])
        for key in ("age_bounds", "biopsy_times", "censor_range"):
            kw[key] = tuple(d[key])
        return cls(**kw)

    def with_updates(self, **kw) -> "SimulationParams":
        return replace(self, **kw)

    def effective_model(self) -> ModelParameters:
        """Generating parameters, with the treatment hazard removed when ``treatment`` is off."""
        if self.treatment:
            return self.model
        m = self.model.copy()
        m.gamma_h0[TRT] = -1000.0
        m.gamma[TRT] = 0.0
        m.alpha[TRT] = 0.0
        return m


@dataclass(frozen=True)
class GroundTruth:
    patient_id: str
    true_T_prg: float
    true_T_trt: float
    cause: str


@dataclass(frozen=True, eq=False)
class SimulatedPatient:
    record: PatientRecord
    true_u: np.ndarray
    true_T_prg: float
    true_T_trt: float
    true_cause: str
    biopsy_schedule: np.ndarray
    censor_time: float
    full_history: tuple = ()

    def history_until(self, t: float) -> PatientRecord:
        """Record with the complete PSA trajectory up to ``t`` (ignores the observed event)."""
        obs = tuple(o for o in self.full_history if o.time <= t)
        return PatientRecord(self.record.patient_id, self.record.covariates, obs,
                             EventRecord(0, 0.0, max(t, obs[-1].time if obs else 0.0)))

    @property
    def truth(self) -> GroundTruth:
        return GroundTruth(self.record.patient_id, self.true_T_prg, self.true_T_trt, self.true_cause)


class _EventSolver:
    """Cumulative hazards on a shared panel grid, with root finding inside a panel."""

    def __init__(self, model: ModelParameters, spec: ModelSpec, horizon: float, panel: float = 0.25):
        self.model = model
        self.spec = spec
        self.horizon = horizon
        n_panel = int(math.ceil(horizon / panel))
        self.edges = np.linspace(0.0, horizon, n_panel + 1)
        x, w = gk15_nodes(self.edges[:-1], self.edges[1:])
        self.w = w
        self.design = HazardDesign.at(x.ravel(), spec)

    def _hazards(self, design, u, cov) -> np.ndarray:
        log_d = math.log(cov.psa_density)
        agec = cov.age - AGE_CENTER
        with np.errstate(over="ignore"):
            return np.stack([np.exp(_eta(k, design, self.model, u, log_d, agec)) for k in (PRG, TRT)])

    def panel_cumhaz(self, u, cov) -> np.ndarray:
        """Per-cause cumulative hazard at every panel edge, shape (2, n_edges)."""
        h = self._hazards(self.design, u, cov).reshape(2, *self.w.shape)
        inc = np.sum(h * self.w, axis=-1)
        return np.concatenate([np.zeros((2, 1)), np.cumsum(inc, axis=1)], axis=1)

    def cumhaz(self, t: float, u, cov, edge_values: np.ndarray) -> np.ndarray:
        """Per-cause cumulative hazard at ``t`` consistent with the panel grid."""
        j = min(int(np.searchsorted(self.edges, t, side="right")) - 1, self.edges.size - 2)
        a = self.edges[j]
        if t == a:
            return edge_values[:, j]
        x, w = gk15_nodes(a, t)
        h = self._hazards(HazardDesign.at(x, self.spec), u, cov)
        return edge_values[:, j] + h @ w

    def hazard_at(self, t: float, u, cov) -> np.ndarray:
        return self._hazards(HazardDesign.at([t], self.spec), u, cov)[:, 0]

    def draw(self, u, cov, rng: np.random.Generator):
        """Return ``(T_prg, T_trt, cause, residual)`` by inverse transform."""
        target = rng.exponential()
        cause_u = rng.uniform()
        edge_values = self.panel_cumhaz(u, cov)
        total = edge_values.sum(axis=0)
        if not total[-1] >= target:
            return math.inf, math.inf, "NONE", 0.0
        j = int(np.searchsorted(total, target)) - 1
        lo, hi = self.edges[j], self.edges[j + 1]

        def f(t):
            return float(np.sum(self.cumhaz(t, u, cov, edge_values))) - target

        t_event = optimize.brentq(f, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200)
        residual = abs(f(t_event))
        h = self.hazard_at(t_event, u, cov)
        p_prg = h[PRG] / (h[PRG] + h[TRT])
        if cause_u < p_prg:
            return t_event, math.inf, "PRG", residual
        return math.inf, t_event, "TRT", residual


def simulate_event_times(params: SimulationParams, u, covariates: BaselineCovariates, seed):
    """Competing event times ``(T_prg, T_trt, cause)``; the event that does not happen is ``inf``.

    Events past ``params.horizon`` are reported as ``inf`` with cause ``"NONE"``.
    """
    rng = np.random.default_rng(seed)
    solver = _EventSolver(params.effective_model(), params.spec, params.horizon)
    t_prg, t_trt, cause, _ = solver.draw(np.asarray(u, float), covariates, rng)
    return t_prg, t_trt, cause


def _draw_covariates(params: SimulationParams, rng: np.random.Generator) -> BaselineCovariates:
    lo, hi = params.age_bounds
    a, b = (lo - params.age_mean) / params.age_sd, (hi - params.age_mean) / params.age_sd
    age = float(stats.truncnorm.rvs(a, b, loc=params.age_mean, scale=params.age_sd, random_state=rng))
    density = float(rng.lognormal(params.log_density_mean, params.log_density_sd))
    return BaselineCovariates(age, density)


def _observe(pid: str, params: SimulationParams, cov, u, t_prg, t_trt, rng):
    """Apply biopsy schedule, censoring and PSA sampling to the true event times."""
    lo, hi = params.censor_range
    censor = float(rng.uniform(lo, hi)) if hi > lo else float(hi)
    censor = min(censor, params.horizon)
    nominal = np.asarray(params.biopsy_times, float)
    biopsies = nominal + rng.uniform(-params.biopsy_jitter, params.biopsy_jitter, nominal.size)
    biopsies = np.concatenate([[0.0], biopsies])

    if t_trt < censor and t_trt < t_prg:
        done = biopsies[biopsies <= t_trt]
        event = EventRecord(2, float(done[-1]), float(t_trt))
    else:
        usable = biopsies[biopsies <= censor]
        detect = usable[usable >= t_prg] if math.isfinite(t_prg) else usable[:0]
        if detect.size:
            t_plus = float(detect[0])
            event = EventRecord(1, float(usable[usable < t_prg][-1]), t_plus)
        else:
            event = EventRecord(0, float(usable[-1]), censor)

    # The whole trajectory to the horizon is drawn; the record keeps the observed prefix.
    grid = np.arange(0.0, params.horizon + 1e-12, params.psa_interval)
    times = grid + np.r_[0.0, rng.uniform(-params.psa_jitter, params.psa_jitter, grid.size - 1)]
    times = times[times <= params.horizon]
    m = mean_psa(times, params.model.beta, u, cov.age, params.spec.ncs_knots)
    y = m + (rng.standard_t(3, times.size) / math.sqrt(params.model.tau_eps) if params.noise else 0.0)
    y = np.maximum(y, 0.0)
    values = np.exp2(y) - 1.0
    full = tuple(LongitudinalObservation(pid, float(t), OutcomeKind.PSA, float(v)) for t, v in zip(times, values))
    obs = tuple(o for o in full if o.time <= event.t_upper)
    return PatientRecord(pid, cov, obs, event), biopsies, censor, full


def simulate_patient(params: SimulationParams, seed, patient_id: str = "p1", *, u=None,
                     covariates: BaselineCovariates | None = None, _solver=None) -> SimulatedPatient:
    """Simulate one patient; ``u`` and ``covariates`` may be pinned for testing."""
    rng = np.random.default_rng(seed)
    cov = covariates if covariates is not None else _draw_covariates(params, rng)
    model = params.model
    if u is None:
        u = rng.multivariate_normal(np.zeros(model.Omega.shape[0]), model.Omega, method="cholesky")
    u = np.asarray(u, float)
    solver = _solver or _EventSolver(params.effective_model(), params.spec, params.horizon)
    t_prg, t_trt, cause, _ = solver.draw(u, cov, rng)
    record, biopsies, censor, full = _observe(patient_id, params, cov, u, t_prg, t_trt, rng)
    return SimulatedPatient(record, u, t_prg, t_trt, cause, biopsies, censor, full)


def simulate_dataset(params: SimulationParams, n: int, seed, *, prefix: str = "p"):
    """``n`` independent patients with per-patient seed streams.

    Returns ``(Dataset, list[SimulatedPatient])``.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    children = np.random.SeedSequence(seed).spawn(n)
    solver = _EventSolver(params.effective_model(), params.spec, params.horizon)
    width = len(str(n))
    sims = [simulate_patient(params, children[i], f"{prefix}{i + 1:0{width}d}", _solver=solver) for i in range(n)]
    props = event_proportions(sims)
    provenance = (f"simulated n={n} seed={seed} progression={props[0]:.2f}% treatment={props[1]:.2f}% "
                  f"censored={props[2]:.2f}%")
    return Dataset(tuple(s.record for s in sims), provenance), sims


def event_proportions(sims) -> tuple[float, float, float]:
    """Observed (progression, treatment, censored) percentages."""
    d = np.array([s.record.event.delta for s in sims])
    return tuple(float(100.0 * np.mean(d == k)) for k in (1, 2, 0))


def write_ground_truth(sims, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "true_T_prg", "true_T_trt", "cause"])
        for s in sims:
            w.writerow([s.record.patient_id, repr(float(s.true_T_prg)), repr(float(s.true_T_trt)), s.true_cause])
    return path


def read_ground_truth(path) -> dict[str, GroundTruth]:
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["patient_id"]] = GroundTruth(row["patient_id"], float(row["true_T_prg"]),
                                                 float(row["true_T_trt"]), row["cause"])
    return out
