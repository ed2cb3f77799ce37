"""Tail Gram matrices Gamma_t and the martingale transforms L and L_sigma.

Notation: h(y) = (1, psi(y)) is the extended location score and
h3(y) = (1, psi(y), 1 + y psi(y)) the location-scale score at sigma = 1.
Gamma(y) = int_{u >= y} h h^T dF, and the compensator vectors are

    G(z) = int_{y <= z} Gamma(y)^{-1} h(y) dF(y),
    J(z) = int_{y <= z} phi(y) Gamma(y)^{-1} h(y) dF(y).

For sigma != 1 every scale quantity reduces to the sigma = 1 one through
Gamma_sigma = D Gamma_1 D with D = diag(1, 1/sigma, 1/sigma), so only the
unit-scale kernels are tabulated.

Two code paths exist: closed forms for the standard normal (driven by the
hazard a(y) = f(y)/(1 - F(y))) and generic quadrature for any ErrorModel.
They are kept independent so they can be cross-checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from .error_models import ErrorModel, extended_score
from .errors import SingularityError, ValidationError
from .quadrature import CumulativeIntegral

T_GUARD = 1e-6
DET_FLOOR = 1e-12
# Closed-form Gaussian kernels stay well conditioned far past the generic guard.
GAUSSIAN_Z_MAX = 10.0
N_NODES = 2048
TAIL_EPS = 1e-15

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def gaussian_hazard(y):
    """a(y) = f(y) / (1 - F(y)) for the standard normal, stable in both tails."""
    return _SQRT_2_OVER_PI / special.erfcx(np.asarray(y, dtype=float) / np.sqrt(2.0))


def _is_gaussian(model: ErrorModel) -> bool:
    return getattr(model, "kind", "") == "gaussian"


def _h3(model: ErrorModel, y) -> np.ndarray:
    one, psi = extended_score(model, y)
    return np.stack([one, psi, 1.0 + np.asarray(y, dtype=float) * psi])


def _score_vector(model: ErrorModel, y, dim: int) -> np.ndarray:
    return extended_score(model, y) if dim == 2 else _h3(model, y)


# ---------------------------------------------------------------------------
# Gram matrices


@dataclass(frozen=True)
class GammaMatrix:
    t: float
    entries: np.ndarray
    det: float


@dataclass(frozen=True)
class GammaScaleMatrix:
    t: float
    sigma: float
    entries: np.ndarray
    det: float


def _gaussian_gram_scaled(y, dim: int) -> np.ndarray:
    """Gamma(y) / (1 - F(y)) for the standard normal, shape (m, dim, dim)."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    a = gaussian_hazard(y)
    out = np.empty((y.size, dim, dim))
    out[:, 0, 0] = 1.0
    out[:, 0, 1] = out[:, 1, 0] = -a
    out[:, 1, 1] = y * a + 1.0
    if dim == 3:
        out[:, 0, 2] = out[:, 2, 0] = -y * a
        out[:, 1, 2] = out[:, 2, 1] = (y * y + 1.0) * a
        out[:, 2, 2] = 2.0 + (y**3 + y) * a
    return out


class TailGram:
    """Generic Gamma(y) by tail quadrature of the score products."""

    def __init__(self, model: ErrorModel, dim: int, n_nodes: int = N_NODES):
        if dim not in (2, 3):
            raise ValidationError("dim must be 2 or 3")
        self.model = model
        self.dim = dim
        lo, hi = model.support(TAIL_EPS)
        self.lo, self.hi = lo, hi
        # the upper-tail integrals are cancelled against each other in det Gamma,
        # so integrate well past the 1e-15 quantile where the model allows it
        top = hi + 0.5 * (hi - lo)
        with np.errstate(all="ignore"):
            probe = _score_vector(model, np.array([top]), dim) * model.pdf(np.array([top]))
        if np.all(np.isfinite(probe)):
            hi = top
        self._pairs = [(i, j) for i in range(dim) for j in range(i, dim) if (i, j) != (0, 0)]

        def integrand(y):
            h = _score_vector(model, y, dim)
            f = model.pdf(y)
            return np.stack([h[i] * h[j] * f for i, j in self._pairs])

        self._tail = CumulativeIntegral(integrand, np.linspace(lo, hi, n_nodes), from_right=True)

    def __call__(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        vals = self._tail(y)
        out = np.empty((y.size, self.dim, self.dim))
        out[:, 0, 0] = self.model.sf(y)
        for row, (i, j) in zip(vals, self._pairs):
            out[:, i, j] = out[:, j, i] = row
        return out


def _tail_gram(model: ErrorModel, dim: int) -> TailGram:
    cache = model.__dict__.setdefault("_adf_cache", {})
    key = ("tailgram", dim)
    if key not in cache:
        cache[key] = TailGram(model, dim)
    return cache[key]


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t < 1.0:
        raise ValidationError(f"t must lie in [0, 1), got {t}")
    if t > 1.0 - T_GUARD:
        raise SingularityError(f"t = {t} is beyond the guard 1 - {T_GUARD}", where=[t])
    return t


def _gram_at(model: ErrorModel, t: float, dim: int, method: str) -> np.ndarray:
    if method not in ("auto", "closed", "quadrature"):
        raise ValidationError(f"unknown method {method!r}")
    if method == "closed" and not _is_gaussian(model):
        raise ValidationError("closed-form Gamma is only available for the Gaussian model")
    closed = _is_gaussian(model) and method != "quadrature"
    if t == 0.0:
        y = -np.inf
    else:
        y = float(model.quantile(t))
    if closed:
        if t == 0.0:
            mat = np.eye(dim)
            if dim == 3:
                mat[2, 2] = 2.0
            return mat
        return _gaussian_gram_scaled(y, dim)[0] * (1.0 - t)
    if t == 0.0:
        # full-support integrals: int psi dF = 0 etc. by quadrature
        y = _tail_gram(model, dim).lo
    mat = _tail_gram(model, dim)(y)[0]
    mat[0, 0] = 1.0 - t
    return mat


def gamma_matrix(model: ErrorModel, t: float, method: str = "auto") -> GammaMatrix:
    """Gamma_t = int_{z >= F^{-1}(t)} h h^T dF."""
    t = _check_t(t)
    mat = _gram_at(model, t, 2, method)
    return GammaMatrix(t=t, entries=mat, det=float(np.linalg.det(mat)))


def gamma_inverse(model: ErrorModel, t: float, method: str = "auto") -> np.ndarray:
    t = _check_t(t)
    if _is_gaussian(model) and method in ("auto", "closed") and t > 0:
        y = float(model.quantile(t))
        a = float(gaussian_hazard(y))
        scaled_det = y * a + 1.0 - a * a
        det = (1.0 - t) ** 2 * scaled_det
        if det < DET_FLOOR:
            raise SingularityError(f"det Gamma_t = {det:.3e} below floor at t = {t}", where=[t])
        return np.array([[y * a + 1.0, a], [a, 1.0]]) / ((1.0 - t) * scaled_det)
    g = gamma_matrix(model, t, method)
    if g.det < DET_FLOOR:
        raise SingularityError(f"det Gamma_t = {g.det:.3e} below floor at t = {t}", where=[t])
    return np.linalg.inv(g.entries)


def gamma_matrix_scale(
    model: ErrorModel, t: float, sigma: float, method: str = "auto"
) -> GammaScaleMatrix:
    """Gamma_{sigma,t} for the location-scale score h_sigma."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    t = _check_t(t)
    d = np.diag([1.0, 1.0 / sigma, 1.0 / sigma])
    mat = d @ _gram_at(model, t, 3, method) @ d
    det = float(np.linalg.det(mat))
    return GammaScaleMatrix(t=t, sigma=float(sigma), entries=mat, det=det)


# ---------------------------------------------------------------------------
# Compensator kernels


class CompensatorKernel:
    """Tabulated V(z) = int_{y <= z} w(y) Gamma(y)^{-1} h(y) dF(y) for a weight w.

    ``dim`` selects the location (2) or location-scale (3) score.  ``z_max``
    is the largest argument at which Gamma is still trusted; arguments
    beyond it raise :class:`SingularityError` through :meth:`check`.
    """

    def __init__(
        self,
        model: ErrorModel,
        dim: int = 2,
        weight: Callable | None = None,
        breakpoints=(),
        method: str = "auto",
        n_nodes: int = N_NODES,
    ):
        if method not in ("auto", "closed", "quadrature"):
            raise ValidationError(f"unknown method {method!r}")
        if method == "closed" and not _is_gaussian(model):
            raise ValidationError("closed-form kernels are only available for the Gaussian model")
        self.model = model
        self.dim = dim
        self.weight = weight
        self.closed = _is_gaussian(model) and method != "quadrature"
        self.method = "closed" if self.closed else "quadrature"
        lo = model.support(TAIL_EPS)[0]
        if self.closed:
            base = self._closed_integrand
            self.z_max = GAUSSIAN_Z_MAX
        else:
            self._gram = _tail_gram(model, dim)
            base = self._generic_integrand
            self.z_max = self._generic_cap(lo)
        if weight is None:
            integrand = base
        else:
            integrand = lambda y: base(y) * np.asarray(weight(y), dtype=float)
        self.integrand = integrand
        nodes = np.linspace(lo, self.z_max, n_nodes)
        bps = np.atleast_1d(np.asarray(breakpoints, dtype=float))
        bps = bps[(bps > lo) & (bps < self.z_max)]
        if bps.size:
            nodes = np.unique(np.concatenate([nodes, bps]))
        self.cum = CumulativeIntegral(integrand, nodes)
        self.lo = lo

    def _closed_integrand(self, y):
        y = np.asarray(y, dtype=float)
        a = gaussian_hazard(y)
        if self.dim == 2:
            return np.stack([np.ones_like(y), a - y]) * (a / (y * a + 1.0 - a * a))
        # solve (Gamma/(1-F)) v = h3, then scale by a = f/(1-F)
        m = _gaussian_gram_scaled(y, 3)
        h = np.stack([np.ones_like(y), -y, 1.0 - y * y]).T[..., None]
        v = np.linalg.solve(m, h)[..., 0].T
        return v * a

    def _generic_integrand(self, y):
        y = np.asarray(y, dtype=float)
        gram = self._gram(y)
        h = _score_vector(self.model, y, self.dim)
        v = np.linalg.solve(gram, h.T[..., None])[..., 0].T
        return v * self.model.pdf(y)

    def _generic_cap(self, lo: float) -> float:
        # largest y with t <= 1 - T_GUARD and det(Gamma / (1 - t)) >= DET_FLOOR;
        # the raw det decays like (1 - t)^dim and would cut far too early
        hi = float(self.model.quantile(1.0 - T_GUARD))
        ys = np.linspace(lo, hi, 4097)
        dets = np.linalg.det(self._gram(ys) / self.model.sf(ys)[:, None, None])
        bad = np.nonzero(dets < DET_FLOOR)[0]
        if bad.size:
            if bad[0] == 0:
                raise SingularityError("Gamma is singular on the whole support", where=[lo])
            hi = float(ys[bad[0] - 1])
        return hi

    def check(self, z) -> None:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        over = z[z > self.z_max]
        if over.size:
            raise SingularityError(
                f"{over.size} residual(s) beyond the Gamma guard z_max = {self.z_max:.4g}: "
                f"{np.sort(over)[::-1][:5].tolist()}",
                where=over,
            )

    def __call__(self, z) -> np.ndarray:
        """Exact cumulative values, shape (dim, len(z)); 0 below the lower cut-off."""
        z = np.atleast_1d(np.asarray(z, dtype=float))
        self.check(z)
        return self.cum(z)

    def interp(self, z) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        self.check(z)
        return self.cum.interp(z)

    def score(self, y) -> np.ndarray:
        return _score_vector(self.model, y, self.dim)


def compensator_kernel(
    model: ErrorModel,
    dim: int = 2,
    weight: Callable | None = None,
    breakpoints=(),
    method: str = "auto",
) -> CompensatorKernel:
    """Cached kernel lookup; the cache lives on the model instance."""
    cache = model.__dict__.setdefault("_adf_cache", {})
    bps = tuple(np.atleast_1d(np.asarray(breakpoints, dtype=float)).tolist())
    key = ("kernel", dim, None if weight is None else id(weight), bps, method)
    hit = cache.get(key)
    if hit is not None and hit[0] is weight:
        return hit[1]
    kernel = CompensatorKernel(model, dim, weight, breakpoints, method)
    cache[key] = (weight, kernel)
    return kernel


def g_vector(model: ErrorModel, z, method: str = "auto") -> np.ndarray:
    """G(z); shape (2,) for scalar z, else (2, len(z))."""
    out = compensator_kernel(model, 2, method=method)(z)
    return out[:, 0] if np.ndim(z) == 0 else out


def j_vector(model: ErrorModel, phi: Callable, z, breakpoints=(), method: str = "auto") -> np.ndarray:
    """J(z) for weight phi; J = G when phi is identically one."""
    out = compensator_kernel(model, 2, phi, breakpoints, method)(z)
    return out[:, 0] if np.ndim(z) == 0 else out


def g_vector_scale(model: ErrorModel, z, sigma: float = 1.0, method: str = "auto") -> np.ndarray:
    """Unit-scale location-scale kernel G_1 at z / sigma, shape (3,) or (3, len(z)).

    Gamma_sigma = D Gamma_1 D with D = diag(1, 1/sigma, 1/sigma), so
    h_sigma(y)^T G_sigma(y) = h3(y / sigma)^T G_1(y / sigma) and the
    transformed processes only ever need G_1 at the standardized argument.
    """
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    out = compensator_kernel(model, 3, method=method)(np.asarray(z, dtype=float) / sigma)
    return out[:, 0] if np.ndim(z) == 0 else out


def transform_L(model: ErrorModel, phi: Callable, y, breakpoints=(), method: str = "auto"):
    """L phi(y) = phi(y) - J(y)^T h(y)."""
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    kernel = compensator_kernel(model, 2, phi, breakpoints, method)
    lo = kernel.lo
    vals = kernel(np.maximum(y_arr, lo))
    vals = np.where(y_arr < lo, 0.0, vals)
    out = np.asarray(phi(y_arr), dtype=float) - np.sum(vals * kernel.score(y_arr), axis=0)
    return float(out[0]) if np.ndim(y) == 0 else out


def transform_L_scale(
    model: ErrorModel, phi: Callable, sigma: float, y, breakpoints=(), method: str = "auto"
):
    """L_sigma phi(y), computed on the unit scale at r = y / sigma."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    y_arr = np.atleast_1d(np.asarray(y, dtype=float))
    if sigma == 1.0:
        unit_phi = phi
    else:
        unit_phi = _ScaledPhi(phi, sigma)
    bps = np.atleast_1d(np.asarray(breakpoints, dtype=float)) / sigma
    kernel = compensator_kernel(model, 3, unit_phi, bps, method)
    r = y_arr / sigma
    vals = kernel(np.maximum(r, kernel.lo))
    vals = np.where(r < kernel.lo, 0.0, vals)
    out = np.asarray(phi(y_arr), dtype=float) - np.sum(vals * kernel.score(r), axis=0)
    return float(out[0]) if np.ndim(y) == 0 else out


class _ScaledPhi:
    """u -> phi(sigma u); hashable by (phi, sigma) so kernel caching works."""

    _instances: dict = {}

    def __new__(cls, phi, sigma):
        key = (id(phi), float(sigma))
        inst = cls._instances.get(key)
        if inst is None or inst.phi is not phi:
            inst = super().__new__(cls)
            inst.phi = phi
            inst.sigma = float(sigma)
            cls._instances[key] = inst
        return inst

    def __call__(self, u):
        return self.phi(self.sigma * np.asarray(u, dtype=float))
