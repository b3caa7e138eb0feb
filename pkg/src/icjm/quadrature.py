"""15-point Gauss-Kronrod quadrature on finite intervals."""

from __future__ import annotations

import numpy as np

# Kronrod abscissae on [0, 1) of the symmetric rule (QUADPACK qk15 layout).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
# Embedded 7-point Gauss weights (for the odd-indexed Kronrod nodes and 0).
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

#: Kronrod nodes on [-1, 1], ascending.
NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
#: Kronrod weights matching :data:`NODES`.
WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
#: Gauss weights on the full 15-point layout (zero at pure Kronrod nodes).
GAUSS_WEIGHTS = np.zeros(15)
GAUSS_WEIGHTS[1:7:2] = _WG[:3]
GAUSS_WEIGHTS[7] = _WG[3]
GAUSS_WEIGHTS[9:15:2] = _WG[2::-1]

N_NODES = 15


def gk15_nodes(a, b):
    """Nodes and weights of the 15-point Kronrod rule mapped to ``[a, b]``.

    ``a`` and ``b`` may be arrays of equal shape; the node axis is appended
    last.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[..., None] + half[..., None] * NODES
    weights = half[..., None] * WEIGHTS
    return nodes, weights


def gk15(f, a: float, b: float, *, error: bool = False):
    """Integrate a vectorized callable over ``[a, b]`` with one GK15 panel.

    With ``error=True`` also returns ``|K15 - G7|`` as a crude error estimate.
    """
    x, w = gk15_nodes(a, b)
    fx = np.asarray(f(x), dtype=float)
    value = fx @ w
    if not error:
        return value
    gauss = fx @ (0.5 * (b - a) * GAUSS_WEIGHTS)
    return value, abs(value - gauss)


def panel_edges(a: float, b: float, max_single: float = 2.0) -> np.ndarray:
    """Panel breakpoints for a cumulative integral over ``[a, b]``.

    Intervals no longer than ``max_single`` are integrated as one panel;
    longer ones are cut at every integer time strictly inside ``(a, b)``.
    """
    if b - a <= max_single:
        return np.array([a, b], dtype=float)
    inner = np.arange(np.floor(a) + 1.0, np.ceil(b))
    inner = inner[(inner > a) & (inner < b)]
    return np.concatenate([[a], inner, [b]]).astype(float)


def integrate_panels(f, a: float, b: float) -> float:
    """GK15 integral over ``[a, b]`` using the :func:`panel_edges` rule."""
    edges = panel_edges(a, b)
    x, w = gk15_nodes(edges[:-1], edges[1:])
    return float(np.sum(np.asarray(f(x.ravel())) * w.ravel()))


class IntervalRule:
    """Flattened GK15 nodes for a batch of intervals.

    Every interval is split per :func:`panel_edges`; the nodes of all panels
    are laid out contiguously so that interval integrals reduce to
    ``np.add.reduceat`` over ``starts``.
    """

    def __init__(self, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have the same shape")
        if np.any(upper < lower):
            raise ValueError("interval with upper < lower")
        nodes, weights, starts = [], [], []
        pos = 0
        for lo, hi in zip(lower, upper):
            edges = panel_edges(lo, hi)
            x, w = gk15_nodes(edges[:-1], edges[1:])
            starts.append(pos)
            pos += x.size
            nodes.append(x.ravel())
            weights.append(w.ravel())
        self.lower = lower
        self.upper = upper
        self.nodes = np.concatenate(nodes) if nodes else np.zeros(0)
        self.weights = np.concatenate(weights) if weights else np.zeros(0)
        self.starts = np.asarray(starts, dtype=np.intp)
        self.owner = np.repeat(np.arange(lower.size), np.diff(np.append(self.starts, pos)))

    def __len__(self) -> int:
        return self.lower.size

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Reduce integrand values at :attr:`nodes` (last axis) per interval."""
        if len(self) == 0:
            return np.zeros(values.shape[:-1] + (0,))
        return np.add.reduceat(values * self.weights, self.starts, axis=-1)
