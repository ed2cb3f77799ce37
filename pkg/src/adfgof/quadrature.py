"""Composite Gauss-Legendre machinery for running (cumulative) integrals.

Every transformed process in this package needs a vector integral of the form
``V(z) = int_{lo}^{z} g(y) dy`` (or the tail version ``int_z^{hi}``) evaluated
at thousands of points.  :class:`CumulativeIntegral` tabulates the integral on a
fixed node grid once and then evaluates it anywhere in the range by adding a
Gauss-Legendre partial panel to the nearest tabulated value, so lookups are
accurate to quadrature precision rather than interpolation precision.  A cubic
Hermite interpolant (using the exact integrand at the nodes as derivative) is
available for bulk lookups where speed matters more.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

GL_ORDER = 20
_GL_X, _GL_W = np.polynomial.legendre.leggauss(GL_ORDER)

Integrand = Callable[[np.ndarray], np.ndarray]


def _as_components(values: np.ndarray, m: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    return values.reshape(values.shape[0], m)


def gl_integrate(g: Integrand, a, b) -> np.ndarray:
    """Fixed-order Gauss-Legendre integral of ``g`` over each ``[a_j, b_j]``.

    ``g`` maps a flat array of abscissae to an array of shape ``(k, m)`` (or
    ``(m,)``).  Returns shape ``(k, len(a))``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pts = mid[:, None] + half[:, None] * _GL_X[None, :]
    vals = _as_components(g(pts.ravel()), pts.size)
    vals = vals.reshape(vals.shape[0], a.size, GL_ORDER)
    return (vals * _GL_W).sum(axis=-1) * half


def composite_integrate(g: Integrand, a: float, b: float, hmax: float) -> np.ndarray:
    """Integral over ``[a, b]`` split into equal panels no wider than ``hmax``."""
    if b <= a:
        probe = _as_components(g(np.array([a])), 1)
        return np.zeros(probe.shape[0]) if b == a else -composite_integrate(g, b, a, hmax)
    npan = max(1, int(np.ceil((b - a) / hmax)))
    edges = np.linspace(a, b, npan + 1)
    return gl_integrate(g, edges[:-1], edges[1:]).sum(axis=1)


def running_integral(g: Integrand, lo: float, points, hmax: float) -> np.ndarray:
    """``int_lo^{p} g`` for every ``p`` in ``points`` (any order), shape ``(k, len(points))``.

    Panels are the gaps between consecutive sorted points, each split so that
    no sub-panel is wider than ``hmax``.  Points below ``lo`` get 0.
    """
    points = np.asarray(points, dtype=float)
    order = np.argsort(points, kind="stable")
    sp = np.maximum(points[order], lo)
    knots = np.concatenate(([lo], sp))
    gaps = np.diff(knots)
    nsub = np.maximum(1, np.ceil(gaps / hmax).astype(int))
    # build sub-panel edges for all gaps at once
    owner = np.repeat(np.arange(gaps.size), nsub)
    frac_idx = np.arange(owner.size) - np.repeat(np.cumsum(nsub) - nsub, nsub)
    left = knots[owner] + gaps[owner] * frac_idx / nsub[owner]
    right = knots[owner] + gaps[owner] * (frac_idx + 1) / nsub[owner]
    pieces = gl_integrate(g, left, right)
    k = pieces.shape[0]
    per_gap = np.zeros((k, gaps.size))
    np.add.at(per_gap.T, owner, pieces.T)
    cum = np.cumsum(per_gap, axis=1)
    out = np.empty((k, points.size))
    out[:, order] = cum
    return out


class CumulativeIntegral:
    """Tabulated running integral of a vector integrand on ``[nodes[0], nodes[-1]]``.

    With ``from_right=False`` the value at ``z`` is ``int_{nodes[0]}^{z} g``;
    with ``from_right=True`` it is ``int_{z}^{nodes[-1]} g``.  Arguments
    outside the node range are clamped to the nearest end (callers guard the
    range themselves).
    """

    def __init__(self, g: Integrand, nodes, *, from_right: bool = False):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be a strictly increasing 1-D array")
        self.g = g
        self.nodes = nodes
        self.from_right = from_right
        panels = gl_integrate(g, nodes[:-1], nodes[1:])
        self.ncomp = panels.shape[0]
        if from_right:
            tail = np.cumsum(panels[:, ::-1], axis=1)[:, ::-1]
            self.table = np.concatenate([tail, np.zeros((self.ncomp, 1))], axis=1)
        else:
            self.table = np.concatenate(
                [np.zeros((self.ncomp, 1)), np.cumsum(panels, axis=1)], axis=1
            )
        deriv = _as_components(g(nodes), nodes.size)
        self._slope = -deriv if from_right else deriv

    @property
    def lo(self) -> float:
        return float(self.nodes[0])

    @property
    def hi(self) -> float:
        return float(self.nodes[-1])

    def _locate(self, z: np.ndarray) -> np.ndarray:
        k = np.searchsorted(self.nodes, z, side="right") - 1
        return np.clip(k, 0, self.nodes.size - 2)

    def __call__(self, z) -> np.ndarray:
        """Exact (quadrature-precision) values, shape ``(ncomp, len(z))``."""
        z = np.clip(np.atleast_1d(np.asarray(z, dtype=float)), self.lo, self.hi)
        k = self._locate(z)
        if self.from_right:
            part = gl_integrate(self.g, z, self.nodes[k + 1])
            return self.table[:, k + 1] + part
        part = gl_integrate(self.g, self.nodes[k], z)
        return self.table[:, k] + part

    def interp(self, z) -> np.ndarray:
        """Cubic Hermite interpolation between nodes; cheap bulk lookups."""
        z = np.clip(np.atleast_1d(np.asarray(z, dtype=float)), self.lo, self.hi)
        k = self._locate(z)
        x0 = self.nodes[k]
        h = self.nodes[k + 1] - x0
        s = (z - x0) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return (
            h00 * self.table[:, k]
            + h10 * h * self._slope[:, k]
            + h01 * self.table[:, k + 1]
            + h11 * h * self._slope[:, k + 1]
        )
