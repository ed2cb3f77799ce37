"""Null error distributions, extended scores and the phi_t index families."""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from .errors import DomainError, ValidationError
from .quadrature import CumulativeIntegral

_SQRT2PI = np.sqrt(2.0 * np.pi)

# Range used for all F-integrals: (quantile(1e-15), quantile(1 - 1e-15)); the
# tail mass cut at 1e-9 would already cost ~1e-7 on second moments.
INNER_PRODUCT_EPS = 1e-15
INNER_PRODUCT_EPSABS = 1e-10


class ErrorModel:
    """A continuous error law F given by density, cdf and score closures.

    ``score`` is the log-density derivative f'/f.  When ``quantile`` is not
    supplied it is obtained by bisection on ``cdf`` inside ``bracket`` with
    absolute tolerance 1e-12.  ``sf`` (upper tail 1 - F) defaults to
    ``1 - cdf`` but may be supplied for accuracy in the right tail.
    """

    kind = "generic"

    def __init__(
        self,
        pdf: Callable,
        cdf: Callable,
        score: Callable,
        quantile: Callable | None = None,
        sf: Callable | None = None,
        name: str = "custom",
        bracket: tuple[float, float] = (-1e3, 1e3),
    ):
        self._pdf = pdf
        self._cdf = cdf
        self._score = score
        self._quantile = quantile
        self._sf = sf
        self.name = name
        self.bracket = (float(bracket[0]), float(bracket[1]))
        self._fisher = None

    def pdf(self, y):
        return np.asarray(self._pdf(np.asarray(y, dtype=float)), dtype=float)

    def cdf(self, y):
        return np.asarray(self._cdf(np.asarray(y, dtype=float)), dtype=float)

    def sf(self, y):
        if self._sf is not None:
            return np.asarray(self._sf(np.asarray(y, dtype=float)), dtype=float)
        return 1.0 - self.cdf(y)

    def score(self, y):
        return np.asarray(self._score(np.asarray(y, dtype=float)), dtype=float)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if np.any((u <= 0) | (u >= 1)):
            raise DomainError("quantile argument must lie in (0, 1)")
        if self._quantile is not None:
            return np.asarray(self._quantile(u), dtype=float)
        return self._bisect_quantile(u)

    def _bisect_quantile(self, u):
        lo = np.full(u.shape, self.bracket[0])
        hi = np.full(u.shape, self.bracket[1])
        if np.any(self.cdf(lo) > u) or np.any(self.cdf(hi) < u):
            raise DomainError(f"quantile bracket {self.bracket} does not cover the requested levels")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = self.cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 1e-12):
                break
        return 0.5 * (lo + hi)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Inverse-cdf draws from a caller-owned generator."""
        u = rng.random(size)
        # rng.random can return exactly 0
        u = np.where(u == 0.0, np.finfo(float).tiny, u)
        return self.quantile(u)

    def support(self, eps: float = INNER_PRODUCT_EPS) -> tuple[float, float]:
        lo, hi = self.quantile(np.array([eps, 1.0 - eps]))
        return float(lo), float(hi)

    def expect(self, g: Callable, points=None, eps: float = INNER_PRODUCT_EPS) -> float:
        """int g dF over (quantile(eps), quantile(1 - eps)) by adaptive quadrature."""
        lo, hi = self.support(eps)
        pts = None
        if points is not None:
            pts = [p for p in np.atleast_1d(points) if lo < p < hi] or None
        val, _ = integrate.quad(
            lambda y: float(g(y)) * float(self.pdf(y)),
            lo,
            hi,
            points=pts,
            epsabs=INNER_PRODUCT_EPSABS,
            epsrel=1e-12,
            limit=500,
        )
        return val

    def inner(self, f: Callable, g: Callable, points=None) -> float:
        """<f, g> in L2(F)."""
        return self.expect(lambda y: f(y) * g(y), points=points)

    @property
    def fisher_info(self) -> float:
        """Location Fisher information int psi_f^2 dF."""
        if self._fisher is None:
            self._fisher = self.expect(lambda y: self.score(y) ** 2)
        return self._fisher

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"


class GaussianModel(ErrorModel):
    """Standard normal errors with closed-form score psi(y) = -y."""

    kind = "gaussian"

    def __init__(self):
        super().__init__(
            pdf=lambda y: np.exp(-0.5 * y * y) / _SQRT2PI,
            cdf=special.ndtr,
            score=lambda y: -y,
            quantile=special.ndtri,
            sf=lambda y: special.ndtr(-y),
            name="gaussian",
        )

    @property
    def fisher_info(self) -> float:
        return 1.0


def gaussian_model() -> GaussianModel:
    return GaussianModel()


def extended_score(model: ErrorModel, y) -> np.ndarray:
    """h(y) = (1, psi_f(y)); shape (2,) for scalar y, else (2, len(y))."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("extended_score requires finite arguments")
    psi = model.score(y)
    if not np.all(np.isfinite(psi)):
        bad = np.atleast_1d(y)[~np.isfinite(np.atleast_1d(psi))]
        raise DomainError(f"score undefined at y = {bad[:5].tolist()}")
    return np.stack([np.ones_like(psi), psi])


def extended_score_ls(model: ErrorModel, y, sigma: float) -> np.ndarray:
    """h_sigma(y) = (1, psi(y/s)/s, (1 + (y/s) psi(y/s))/s)."""
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    y = np.asarray(y, dtype=float)
    u = y / sigma
    one, psi = extended_score(model, u)
    return np.stack([one, psi / sigma, (1.0 + u * psi) / sigma])


class PhiFamily:
    """The family phi_t(y) = phi(y) 1{y <= L^{-1}(t)} with L(y) = int_{-inf}^y phi^2 dF.

    ``phi`` is rescaled to unit L2(F) norm (``scale`` records the divisor) so
    that <phi_t, phi_t> = t and increments are orthogonal.
    """

    def __init__(self, model: ErrorModel, phi: Callable, breakpoints=(), n_nodes: int = 2048):
        self.model = model
        self._raw = phi
        lo, hi = model.support(1e-15)
        nodes = np.linspace(lo, hi, n_nodes)
        bps = [b for b in np.atleast_1d(np.asarray(breakpoints, dtype=float)) if lo < b < hi]
        if bps:
            nodes = np.unique(np.concatenate([nodes, bps]))
        self.breakpoints = np.array(sorted(bps))
        raw_sq = lambda y: np.asarray(phi(y), dtype=float) ** 2 * model.pdf(y)
        self._cum = CumulativeIntegral(raw_sq, nodes)
        total = float(self._cum.table[0, -1])
        if not np.isfinite(total) or total <= 0:
            raise ValidationError("phi has zero or infinite L2(F) norm")
        self.scale = np.sqrt(total)
        # a panel carrying F-mass but no phi^2 mass makes L flat there
        inc = np.diff(self._cum.table[0]) / total
        fmass = np.diff(model.cdf(nodes))
        flat = (fmass > 1e-12) & (inc <= 1e-300)
        if np.any(flat):
            where = nodes[:-1][flat]
            raise ValidationError(
                f"L is not strictly increasing: phi vanishes on [{where[0]:.4g}, {where[-1]:.4g}]"
            )
        self.lo, self.hi = lo, hi

    def base(self, y):
        return np.asarray(self._raw(np.asarray(y, dtype=float)), dtype=float) / self.scale

    __call__ = base

    def L(self, y):
        y = np.asarray(y, dtype=float)
        out = self._cum(np.ravel(y))[0] / self.scale**2
        out = np.where(np.ravel(y) <= self.lo, 0.0, np.where(np.ravel(y) >= self.hi, 1.0, out))
        return out.reshape(y.shape) if y.ndim else float(out[0])

    def Linv(self, t):
        t = np.asarray(t, dtype=float)
        if np.any((t <= 0) | (t >= 1)):
            raise DomainError("Linv argument must lie in (0, 1)")
        flat = np.ravel(t)
        out = np.array(
            [optimize.brentq(lambda y, s=s: self.L(y) - s, self.lo, self.hi, xtol=1e-13) for s in flat]
        )
        return out.reshape(t.shape) if t.ndim else float(out[0])

    def member(self, t: float) -> Callable:
        """phi_t as a callable; t = 0 gives 0 and t = 1 gives phi."""
        if t <= 0:
            return lambda y: np.zeros_like(np.asarray(y, dtype=float))
        if t >= 1:
            return self.base
        cut = self.Linv(t)
        return lambda y: self.base(y) * (np.asarray(y) <= cut)


def make_phi_family(model: ErrorModel, phi: Callable, breakpoints=()) -> PhiFamily:
    return PhiFamily(model, phi, breakpoints=breakpoints)
