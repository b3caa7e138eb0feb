"""Independent reference implementations used by the tests.

Nothing here imports the package's numerical internals. Each oracle is a
direct, slow transcription of a textbook definition.
"""

from __future__ import annotations

import math

import numpy as np


def cox_de_boor(x: float, knots, degree: int) -> np.ndarray:
    """All B-spline basis values at ``x`` by the Cox-de Boor recursion.

    The last non-empty knot span is closed on the right so the basis is a
    partition of unity at the upper boundary.
    """
    t = list(map(float, knots))
    n_basis = len(t) - degree - 1
    last = max(i for i in range(len(t) - 1) if t[i] < t[i + 1])

    def b(i, k):
        if k == 0:
            if t[i] <= x < t[i + 1]:
                return 1.0
            return 1.0 if (i == last and x == t[i + 1]) else 0.0
        left = 0.0 if t[i + k] == t[i] else (x - t[i]) / (t[i + k] - t[i]) * b(i, k - 1)
        right = 0.0 if t[i + k + 1] == t[i + 1] else (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * b(i + 1, k - 1)
        return left + right

    return np.array([b(i, degree) for i in range(n_basis)])


def natural_spline_truncated_power(x, knots) -> np.ndarray:
    """Truncated-power basis of the natural cubic splines with the given knots.

    Columns ``x - k_1`` and ``d_j - d_{K-1}`` for ``j = 1..K-2``, where
    ``d_j(x) = ((x - k_j)^3_+ - (x - k_K)^3_+) / (k_K - k_j)``. Every column
    vanishes at the first knot, so the span equals that of a natural spline
    basis without intercept anchored at the lower boundary.
    """
    x = np.asarray(x, float)
    k = np.asarray(knots, float)
    K = k.size

    def d(j):
        return (np.clip(x - k[j], 0, None) ** 3 - np.clip(x - k[-1], 0, None) ** 3) / (k[-1] - k[j])

    cols = [x - k[0]] + [d(j) - d(K - 2) for j in range(K - 2)]
    return np.stack(cols, axis=-1)


def t3_logpdf(resid, tau) -> np.ndarray:
    """Student-t with 3 degrees of freedom, precision ``tau``, written out from the gamma-function form."""
    nu = 3.0
    r = np.asarray(resid, float)
    const = math.lgamma((nu + 1) / 2) - math.lgamma(nu / 2) - 0.5 * math.log(nu * math.pi) + 0.5 * math.log(tau)
    return const - (nu + 1) / 2 * np.log1p(tau * r * r / nu)


def trapezoid_cumulative(f_values, x) -> np.ndarray:
    """Cumulative trapezoid integral starting at ``x[0]``."""
    dx = np.diff(x)
    inc = 0.5 * dx * (f_values[1:] + f_values[:-1])
    return np.concatenate([[0.0], np.cumsum(inc)])


def brute_survival_loglik(delta, t_lo, t_hi, hazard_prg, hazard_trt, n=100_001) -> float:
    """Survival log-likelihood of one subject by fine trapezoid integration.

    ``hazard_prg`` and ``hazard_trt`` map an array of times to hazard values.
    """
    if delta == 0:
        x1 = np.linspace(0.0, t_lo, n)
        x2 = np.linspace(0.0, t_hi, n)
        H_p = trapezoid_cumulative(hazard_prg(x1), x1)[-1] if t_lo > 0 else 0.0
        H_t = trapezoid_cumulative(hazard_trt(x2), x2)[-1] if t_hi > 0 else 0.0
        return -H_p - H_t
    if delta == 2:
        x1 = np.linspace(0.0, t_lo, n)
        x2 = np.linspace(0.0, t_hi, n)
        H_p = trapezoid_cumulative(hazard_prg(x1), x1)[-1] if t_lo > 0 else 0.0
        H_t = trapezoid_cumulative(hazard_trt(x2), x2)[-1]
        return math.log(float(hazard_trt(np.array([t_hi]))[0])) - H_p - H_t
    x = np.linspace(0.0, t_hi, n)
    hp = hazard_prg(x)
    H_p = trapezoid_cumulative(hp, x)
    H_t = trapezoid_cumulative(hazard_trt(x), x)[-1]
    mask = x >= t_lo
    # Put t_lo on the grid exactly by interpolating H_p there.
    xs = np.concatenate([[t_lo], x[mask]])
    hs = np.concatenate([hazard_prg(np.array([t_lo])), hp[mask]])
    Hs = np.concatenate([[np.interp(t_lo, x, H_p)], H_p[mask]])
    integrand = hs * np.exp(-Hs)
    return math.log(float(trapezoid_cumulative(integrand, xs)[-1])) - H_t


def sample_from_curve(cdf, a: float, b: float, size: int, rng, grid_points: int = 200_001) -> np.ndarray:
    """Draws of ``T`` given ``a < T <= b`` from a risk curve by inverse transform on a fine grid."""
    x = np.linspace(a, b, grid_points)
    F = np.asarray(cdf(x), float)
    F = (F - F[0]) / (F[-1] - F[0])
    F = np.maximum.accumulate(F)
    u = rng.random(size)
    return np.interp(u, F, x)


def replay_schedule(T: np.ndarray, planned) -> tuple[np.ndarray, np.ndarray]:
    """Biopsies until detection and detection delay for progression times ``T``."""
    planned = np.asarray(planned, float)
    idx = np.searchsorted(planned, T, side="left")
    return idx + 1.0, planned[idx] - T


def aalen_johansen_hand_example():
    """Five subjects: (1, c1), (2, c0), (3, c2), (4, c1), (5, c0).

    Hand computation:
      t=1: n=5, S- = 1      -> CIF1 = 1/5,             S = 4/5
      t=3: n=3, S- = 4/5    -> CIF2 = (4/5)(1/3)=4/15,  S = 8/15
      t=4: n=2, S- = 8/15   -> CIF1 = 1/5 + (8/15)(1/2) = 7/15
    """
    events = [(1.0, 1), (2.0, 0), (3.0, 2), (4.0, 1), (5.0, 0)]
    times = np.array([1.0, 3.0, 4.0])
    cif = np.array([[1 / 5, 0.0], [1 / 5, 4 / 15], [7 / 15, 4 / 15]])
    return events, times, cif
