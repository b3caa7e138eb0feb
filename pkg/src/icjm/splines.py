"""Spline design matrices used by the longitudinal and baseline-hazard parts.

Two bases are provided:

* a natural cubic spline with three degrees of freedom for the PSA time
  trend, constructed the same way as R's ``splines::ns`` (B-spline basis
  projected onto the null space of the boundary second-derivative
  constraints, linear continuation outside the boundary knots);
* a clamped cubic B-spline basis for the log baseline hazard, with a
  difference penalty for the P-spline prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.interpolate import BSpline

__all__ = [
    "KnotVector",
    "PenaltyMatrix",
    "ncs_design",
    "bspline_design",
    "knots_from_quantiles",
    "difference_penalty",
    "ncs_knots_from_times",
    "h0_knots_from_times",
    "RIDGE",
]

RIDGE = 1e-6


class KnotError(ValueError):
    """Raised for malformed or degenerate knot vectors."""


@dataclass(frozen=True)
class KnotVector:
    """Interior knots plus the two boundary knots (times in years)."""

    interior: tuple
    boundary: tuple

    def __post_init__(self):
        interior = tuple(float(k) for k in self.interior)
        boundary = tuple(float(k) for k in self.boundary)
        object.__setattr__(self, "interior", interior)
        object.__setattr__(self, "boundary", boundary)
        if len(boundary) != 2:
            raise KnotError("boundary must hold exactly two knots")
        full = (boundary[0],) + interior + (boundary[1],)
        if not all(np.isfinite(full)):
            raise KnotError("knots must be finite")
        if any(b <= a for a, b in zip(full[:-1], full[1:])):
            raise KnotError("knots must be strictly increasing and bracketed by the boundary")

    @property
    def all_knots(self) -> np.ndarray:
        return np.array((self.boundary[0],) + self.interior + (self.boundary[1],))

    def augmented(self, degree: int = 3) -> np.ndarray:
        """Knot sequence with each boundary knot repeated ``degree + 1`` times."""
        lo, hi = self.boundary
        return np.concatenate([[lo] * (degree + 1), self.interior, [hi] * (degree + 1)])

    def to_dict(self) -> dict:
        return {"interior": list(self.interior), "boundary": list(self.boundary)}

    @classmethod
    def from_dict(cls, d: dict) -> "KnotVector":
        return cls(tuple(d["interior"]), tuple(d["boundary"]))


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    dim: int
    order: int
    matrix: np.ndarray
    rank: int

    def quadratic_form(self, coef) -> np.ndarray:
        coef = np.asarray(coef, dtype=float)
        return np.einsum("...i,ij,...j->...", coef, self.matrix, coef)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "order": self.order}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyMatrix":
        return difference_penalty(d["dim"], d["order"])


@lru_cache(maxsize=64)
def _basis_spline(aug: tuple, degree: int) -> BSpline:
    n_basis = len(aug) - degree - 1
    return BSpline(np.array(aug), np.eye(n_basis), degree, extrapolate=True)


def _bspline_values(x: np.ndarray, aug: np.ndarray, degree: int, deriv: int = 0) -> np.ndarray:
    spl = _basis_spline(tuple(aug.tolist()), degree)
    return spl(x, nu=deriv) if deriv else spl(x)


@lru_cache(maxsize=64)
def _ncs_projection(knots: KnotVector) -> tuple[np.ndarray, np.ndarray]:
    aug = knots.augmented(3)
    const = _bspline_values(np.array(knots.boundary), aug, 3, deriv=2)[:, 1:]
    q, _ = linalg.qr(const.T)
    aug.setflags(write=False)
    q.setflags(write=False)
    return aug, q


def ncs_design(t, knots: KnotVector) -> np.ndarray:
    """Natural cubic spline basis (no intercept) at ``t``.

    Returns an array of shape ``t.shape + (df,)`` where
    ``df = len(knots.interior) + 1``. Points outside the boundary knots are
    continued linearly from the boundary value and slope.
    """
    t_arr = np.asarray(t, dtype=float)
    flat = np.atleast_1d(t_arr).ravel()
    aug, q = _ncs_projection(knots)
    lo, hi = knots.boundary
    raw = np.empty((flat.size, aug.size - 4))
    inside = (flat >= lo) & (flat <= hi)
    if inside.any():
        raw[inside] = _bspline_values(flat[inside], aug, 3)
    for side, pivot in ((flat < lo, lo), (flat > hi, hi)):
        if side.any():
            v0 = _bspline_values(np.array([pivot]), aug, 3)
            v1 = _bspline_values(np.array([pivot]), aug, 3, deriv=1)
            raw[side] = v0 + (flat[side] - pivot)[:, None] * v1
    basis = (raw[:, 1:] @ q)[:, 2:]
    return basis.reshape(t_arr.shape + (basis.shape[1],))


def bspline_design(t, knots: KnotVector, degree: int = 3) -> np.ndarray:
    """Clamped B-spline basis at ``t`` with boundary clamping.

    Times outside ``knots.boundary`` are clamped to the nearest boundary
    knot, so the baseline hazard is held flat beyond the last knot.
    """
    t_arr = np.asarray(t, dtype=float)
    flat = np.clip(np.atleast_1d(t_arr).ravel(), *knots.boundary)
    aug = knots.augmented(degree)
    basis = _bspline_values(flat, aug, degree)
    return basis.reshape(t_arr.shape + (basis.shape[1],))


def knots_from_quantiles(times, count: int) -> np.ndarray:
    """``count`` knots at evenly spaced quantiles of ``times``.

    Tied quantiles are separated by the smallest forward shift that makes
    the sequence strictly increasing.
    """
    times = np.asarray(times, dtype=float).ravel()
    if times.size == 0:
        raise KnotError("no times supplied")
    if count < 2:
        raise KnotError("count must be at least 2")
    lo, hi = times.min(), times.max()
    if hi <= lo:
        raise KnotError("all times identical: degenerate knot vector")
    knots = np.quantile(times, np.linspace(0.0, 1.0, count))
    eps = 1e-6 * (hi - lo)
    for i in range(1, count):
        if knots[i] <= knots[i - 1]:
            knots[i] = knots[i - 1] + eps
    return knots


def difference_penalty(dim: int, order: int = 2) -> PenaltyMatrix:
    """``D'D + 1e-6 I`` for the ``order``-th difference matrix ``D``."""
    if order < 1 or dim <= order:
        raise ValueError(f"need dim > order >= 1, got dim={dim}, order={order}")
    d = np.diff(np.eye(dim), n=order, axis=0)
    m = d.T @ d + RIDGE * np.eye(dim)
    return PenaltyMatrix(dim, order, m, int(np.linalg.matrix_rank(m)))


def ncs_knots_from_times(times, upper_quantile: float = 0.99) -> KnotVector:
    """Boundary at 0 and the ``upper_quantile`` of ``times``; tertile interior knots."""
    times = np.asarray(times, dtype=float)
    interior = np.quantile(times, [1.0 / 3.0, 2.0 / 3.0])
    return KnotVector(tuple(interior), (0.0, float(np.quantile(times, upper_quantile))))


def h0_knots_from_times(event_times, max_followup: float, n_interior: int = 8) -> KnotVector:
    """Baseline-hazard knots: quantile interior knots, boundary ``(0, max_followup)``.

    ``n_interior = 8`` yields 12 cubic B-spline basis functions.
    """
    q = knots_from_quantiles(event_times, n_interior + 2)[1:-1]
    if q[0] <= 0.0 or q[-1] >= max_followup:
        raise KnotError("interior baseline-hazard knots must lie inside (0, max_followup)")
    return KnotVector(tuple(q), (0.0, float(max_followup)))
