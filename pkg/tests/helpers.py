"""Small constructors shared by the tests."""

import numpy as np

from icjm.data import BaselineCovariates, EventRecord, LongitudinalObservation, PatientRecord
from icjm.likelihood import ModelParameters, ModelSpec
from icjm.simulate import PRESET_PARAMETERS, PRESET_SPEC

COV62 = BaselineCovariates(age=62.0, psa_density=1.0)


def constant_hazard_params(h_p: float, h_t: float, spec: ModelSpec = PRESET_SPEC) -> ModelParameters:
    """Preset parameters with flat baselines and no covariate effects on the hazards.

    The B-spline basis sums to one, so a constant coefficient vector gives a
    constant log baseline hazard.
    """
    p = PRESET_PARAMETERS.copy()
    p.gamma_h0 = np.vstack([np.full(spec.n_h0, np.log(h_p)), np.full(spec.n_h0, np.log(h_t))])
    p.gamma = np.zeros(2)
    p.alpha = np.zeros((2, spec.n_alpha))
    return p


def make_patient(pid="p1", psa=((0.0, 5.0), (0.5, 5.5), (1.0, 6.1)), delta=0, t_minus=1.0, t_upper=2.0,
                 age=65.0, density=0.15, cr=()) -> PatientRecord:
    obs = [LongitudinalObservation(pid, t, "psa", v) for t, v in psa]
    obs += [LongitudinalObservation(pid, t, "cr", k, n) for t, k, n in cr]
    return PatientRecord(pid, BaselineCovariates(age, density), tuple(obs), EventRecord(delta, t_minus, t_upper))


def piecewise_hazard_cdf(t_b: float, breaks, rates):
    """``Π(t) = 1 - exp(-H(t_b, t))`` for a hazard constant between ``breaks``.

    ``breaks`` are the right ends of the pieces; the last rate extends beyond.
    """
    edges = np.concatenate([[t_b], np.asarray(breaks, float)])
    rates = np.asarray(rates, float)

    def cdf(t):
        t = np.asarray(t, float)
        H = np.zeros_like(t)
        for i, r in enumerate(rates):
            lo = edges[i]
            hi = edges[i + 1] if i + 1 < edges.size else np.inf
            H += r * np.clip(np.minimum(t, hi) - lo, 0.0, None)
        return -np.expm1(-H)

    return cdf


# Risk curves reproducing the worked scheduling example: risk 0.08 at year 2
# (defer) and 0.11 at year 2.5 (biopsy) with threshold 0.1.
EXAMPLE_CURVE_YEAR2 = dict(t_b=0.0, breaks=(2.0, 2.5, 5.5, 7.5), rates=(0.0417, 0.0663, 0.038, 0.06, 0.04))
EXAMPLE_CURVE_YEAR3 = dict(t_b=3.0, breaks=(6.0, 8.0), rates=(0.038, 0.06, 0.04))
