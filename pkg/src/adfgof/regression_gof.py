"""Scanning-family innovation transform K and the regression process w_n(B).

With a scanning family A_z = {x : z(x) <= z} and design law H,

    C_z       = int_{z(y) > z} mu_dot mu_dot^T dH,
    K gamma(x) = gamma(x) - R_gamma(z(x)) mu_dot(x),
    R_gamma(u) = int_{z(y) <= u} gamma(y) mu_dot(y)^T C_{z(y)}^{-1} dH(y),

and w_n(B) = n^{-1/2} sum_i [1_B(X_i) - R_{1_B}(z(X_i)) mu_dot(X_i)] phi(e_i).

Analytic designs reduce every H-integral to a 1-D integral over the scan
coordinate z of conditional expectations E[g(X) | z(X) = z].  The empirical
design replaces H by the sample.
"""

from __future__ import annotations

import warnings
from typing import Callable

import numpy as np
from scipy import special

from . import limit_laws
from .errors import SingularityError, ValidationError
from .estimation import RegressionModel, as_dataset, fit_least_squares, residuals as model_residuals
from .quadrature import CumulativeIntegral, running_integral
from .reports import TestReport
from .transform_core import gaussian_hazard

TAU = 0.05
_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
_W_SPAN = 10.0
_W_PANELS = 20
_C_PANELS = 1024
_R_PANELS = 256
_TOP_EPS = 1e-13
_CHUNK = 512
_EXACT_FIT = 1e-12


# ---------------------------------------------------------------------------
# design laws


class UniformDesign:
    """X ~ U[lo, hi] (p = 1)."""

    p = 1
    analytic = True

    def __init__(self, lo: float = 0.0, hi: float = 1.0):
        if not hi > lo:
            raise ValidationError("UniformDesign needs hi > lo")
        self.lo, self.hi = float(lo), float(hi)


class GaussianDesign:
    """Centered normal design with covariance ``cov`` (p <= 2)."""

    analytic = True

    def __init__(self, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape[0] != cov.shape[1] or cov.shape[0] > 2:
            raise ValidationError("GaussianDesign supports p = 1 or 2")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ValidationError("design covariance must be positive definite")
        self.cov = cov
        self.p = cov.shape[0]

    @classmethod
    def standard(cls, r: float) -> "GaussianDesign":
        if not -1 < r < 1:
            raise ValidationError(f"correlation must lie in (-1, 1), got {r}")
        return cls([[1.0, r], [r, 1.0]])


class EmpiricalDesign:
    """Plug-in design: H replaced by the empirical law of the sample."""

    analytic = False

    def __init__(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.X = X
        self.p = X.shape[1]


class ScanningFamily:
    """A_z = {x : d^T x <= z}; default d = e_1 (first-coordinate half-spaces)."""

    def __init__(self, design, direction=None):
        self.design = design
        p = design.p
        d = np.zeros(p) if direction is None else np.asarray(direction, dtype=float).ravel()
        if direction is None:
            d[0] = 1.0
        if d.size != p or not np.any(d != 0):
            raise ValidationError("scanning direction must be a nonzero p-vector")
        self.direction = d
        self.first_coordinate = bool(d[0] == 1.0 and np.all(d[1:] == 0.0))
        if isinstance(design, UniformDesign) and d[0] <= 0:
            raise ValidationError("uniform design scans along a positive direction")
        if isinstance(design, GaussianDesign):
            cov = design.cov
            self._var = float(d @ cov @ d)
            self._sd = np.sqrt(self._var)
            self._m = cov @ d / self._var
            resid = cov - np.outer(cov @ d, cov @ d) / self._var
            vals, vecs = np.linalg.eigh(resid)
            self._e = vecs[:, -1] * np.sqrt(max(vals[-1], 0.0))
        if isinstance(design, UniformDesign):
            self._scale = d[0]

    def z_of_x(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return X @ self.direction

    # marginal law of the scan coordinate
    def scan_cdf(self, z):
        z = np.asarray(z, dtype=float)
        des = self.design
        if isinstance(des, GaussianDesign):
            return special.ndtr(z / self._sd)
        if isinstance(des, UniformDesign):
            lo, hi = des.lo * self._scale, des.hi * self._scale
            return np.clip((z - lo) / (hi - lo), 0.0, 1.0)
        zs = np.sort(self.z_of_x(des.X))
        return np.searchsorted(zs, z, side="right") / zs.size

    def scan_ppf(self, u):
        u = np.asarray(u, dtype=float)
        des = self.design
        if isinstance(des, GaussianDesign):
            return self._sd * special.ndtri(u)
        if isinstance(des, UniformDesign):
            lo, hi = des.lo * self._scale, des.hi * self._scale
            return lo + u * (hi - lo)
        zs = np.sort(self.z_of_x(des.X))
        idx = np.clip(np.ceil(u * zs.size).astype(int) - 1, 0, zs.size - 1)
        return zs[idx]

    def scan_pdf(self, z):
        z = np.asarray(z, dtype=float)
        des = self.design
        if isinstance(des, GaussianDesign):
            return np.exp(-0.5 * (z / self._sd) ** 2) / (self._sd * np.sqrt(2 * np.pi))
        lo, hi = des.lo * self._scale, des.hi * self._scale
        return np.where((z >= lo) & (z <= hi), 1.0 / (hi - lo), 0.0)

    def scan_range(self) -> tuple[float, float]:
        des = self.design
        if isinstance(des, GaussianDesign):
            q = float(special.ndtri(1e-15))
            return q * self._sd, -q * self._sd
        if isinstance(des, UniformDesign):
            return des.lo * self._scale, des.hi * self._scale
        zs = self.z_of_x(des.X)
        return float(zs.min()), float(zs.max())

    def zcap(self, tau: float) -> float:
        """Upper end of the guarded scan range, H(A_zcap) = 1 - tau."""
        if tau <= 0:
            return np.inf
        if tau >= 1:
            raise ValidationError("tau must lie in [0, 1)")
        return float(self.scan_ppf(1.0 - tau))

    def cond_expect(self, g: Callable, z, corner=None) -> np.ndarray:
        """E[g(X) 1{X <= corner} | z(X) = z], shape (k, len(z)).

        ``g`` maps an (m, p) array of design points to (k, m).
        """
        z = np.atleast_1d(np.asarray(z, dtype=float))
        des = self.design
        if isinstance(des, UniformDesign):
            x = (z / self._scale)[:, None]
            vals = np.atleast_2d(g(x))
            if corner is not None:
                vals = vals * (x[:, 0] <= np.asarray(corner, dtype=float).ravel()[0])
            return vals
        if not isinstance(des, GaussianDesign):
            raise ValidationError("conditional expectations need an analytic design")
        p = des.p
        m, e = self._m, self._e
        wl = np.full(z.shape, -_W_SPAN)
        wu = np.full(z.shape, _W_SPAN)
        ok = np.ones(z.shape, dtype=bool)
        if corner is not None:
            c = np.asarray(corner, dtype=float).ravel()
            for k in range(p):
                if not np.isfinite(c[k]):
                    if c[k] < 0:
                        ok[:] = False
                    continue
                slack = c[k] - m[k] * z
                if abs(e[k]) < 1e-14:
                    ok &= slack >= 0
                elif e[k] > 0:
                    wu = np.minimum(wu, slack / e[k])
                else:
                    wl = np.maximum(wl, slack / e[k])
        if np.all(np.abs(e) < 1e-14):
            x = z[:, None] * m[None, :]
            vals = np.atleast_2d(g(x)) * ok
            return vals
        wu = np.maximum(wu, wl)
        width = (wu - wl) / _W_PANELS
        left = wl[:, None] + width[:, None] * np.arange(_W_PANELS)[None, :]
        nodes = left[:, :, None] + 0.5 * width[:, None, None] * (_GL_X + 1.0)[None, None, :]
        weights = 0.5 * width[:, None, None] * _GL_W[None, None, :] * np.exp(-0.5 * nodes**2) / np.sqrt(2 * np.pi)
        w = nodes.reshape(z.size, -1)
        x = z[:, None, None] * m[None, None, :] + w[:, :, None] * e[None, None, :]
        vals = np.atleast_2d(g(x.reshape(-1, p)))
        vals = vals.reshape(vals.shape[0], z.size, -1)
        out = np.sum(vals * weights.reshape(1, z.size, -1), axis=-1)
        return out * ok


# ---------------------------------------------------------------------------
# the transform kernel


class ScanKernel:
    """C_z and cumulative R-integrals for (model, scanning family, theta)."""

    def __init__(self, model: RegressionModel, fam: ScanningFamily, theta, tau: float = TAU):
        self.model = model
        self.fam = fam
        self.theta = np.asarray(theta, dtype=float)
        self.q = model.q
        self.tau = float(tau)
        if fam.design.p != model.p:
            raise ValidationError(f"design has p = {fam.design.p}, model expects p = {model.p}")
        self.zcap = fam.zcap(self.tau)
        self.analytic = fam.design.analytic
        self._r_cache: dict = {}
        if self.analytic:
            self._build_analytic()
        else:
            self._build_empirical()

    # -- analytic H -------------------------------------------------------
    def _mdot(self, x):
        return self.model.grad_mu(x, self.theta).T  # (q, m)

    def _outer(self, x):
        g = self._mdot(x)
        return (g[:, None, :] * g[None, :, :]).reshape(self.q * self.q, -1)

    def _build_analytic(self):
        lo, hi = self.fam.scan_range()
        self.z_lo, self.z_hi = lo, hi
        # C vanishes at hi by construction; R-integrals stop at tail mass _TOP_EPS
        self._z_top = min(hi, float(self.fam.scan_ppf(1.0 - _TOP_EPS)))
        integrand = lambda z: self.fam.cond_expect(self._outer, z) * self.fam.scan_pdf(z)
        self._c = CumulativeIntegral(integrand, np.linspace(lo, hi, _C_PANELS + 1), from_right=True)
        top = min(self.zcap, hi)
        if top < hi:
            eig = np.linalg.eigvalsh(self.c_matrix(top))
            if eig[0] <= 0:
                raise SingularityError(f"C_z singular at the guard z = {top}", where=[top])

    def c_matrix(self, z) -> np.ndarray:
        """C_z; shape (q, q) for scalar z, else (len(z), q, q)."""
        if self.analytic:
            zz = np.atleast_1d(np.asarray(z, dtype=float))
            out = self._c(zz).T.reshape(-1, self.q, self.q)
        else:
            out = self._empirical_c(np.atleast_1d(np.asarray(z, dtype=float)))
        return out[0] if np.ndim(z) == 0 else out

    def _c_inv_interp(self, z):
        mats = self._c.interp(z).T.reshape(-1, self.q, self.q)
        return np.linalg.inv(mats)

    def _nodes(self, top: float) -> np.ndarray:
        lo = self.z_lo
        top = min(top, self.z_hi)
        base = np.linspace(lo, top, _R_PANELS + 1)
        # grade towards the upper end, where C_z^{-1} grows like 1 / H(A_z^c)
        t_top = float(self.fam.scan_cdf(top))
        s = 1.0 - t_top
        extra = []
        if s < 0.1:
            k = np.geomspace(max(s, 1e-300), 0.1, 80)
            extra = self.fam.scan_ppf(1.0 - k)
        nodes = np.unique(np.concatenate([base, np.asarray(extra, dtype=float)]))
        return nodes[(nodes >= lo) & (nodes <= top)]

    def r_integral(self, gamma: Callable | None = None, corner=None):
        """Callable u -> R(u) (shape (q, len(u))) for gamma or for 1_{(-inf, corner]}."""
        key = (id(gamma), None if corner is None else tuple(np.asarray(corner, float).ravel()))
        hit = self._r_cache.get(key)
        if hit is not None and hit[0] is gamma:
            return hit[1]
        if self.analytic:
            fn = self._analytic_r(gamma, corner)
        else:
            fn = self._empirical_r(gamma, corner)
        self._r_cache[key] = (gamma, fn)
        return fn

    def _analytic_r(self, gamma, corner):
        fam = self.fam
        cut = self.zcap
        if corner is not None and np.all(fam.direction >= 0):
            c = np.asarray(corner, dtype=float).ravel()
            cut = min(cut, float(np.where(np.isfinite(c), c, np.inf) @ fam.direction) if np.all(np.isfinite(c)) else cut)
        top = min(cut, self._z_top)

        def g(x):
            md = self._mdot(x)
            if gamma is not None:
                md = md * np.asarray(gamma(x), dtype=float)
            return md

        def integrand(z):
            ce = fam.cond_expect(g, z, corner)  # (q, m)
            cinv = self._c_inv_interp(z)  # (m, q, q)
            return np.einsum("qm,mqr->rm", ce, cinv) * fam.scan_pdf(z)

        if top <= self.z_lo:
            return lambda u: np.zeros((self.q, np.size(u)))
        cum = CumulativeIntegral(integrand, self._nodes(top))

        def r_of(u):
            u = np.atleast_1d(np.asarray(u, dtype=float))
            if np.any(u > self.zcap + 1e-12):
                raise SingularityError(f"scan coordinate beyond the guard {self.zcap:.4g}", where=u[u > self.zcap])
            uc = np.clip(u, self.z_lo, top)
            out = np.concatenate([cum(uc[i : i + _CHUNK]) for i in range(0, max(uc.size, 1), _CHUNK)], axis=1)
            return np.where(u[None, :] <= self.z_lo, 0.0, out)

        return r_of

    # -- empirical H ------------------------------------------------------
    def _build_empirical(self):
        X = self.fam.design.X
        self._ez = self.fam.z_of_x(X)
        order = np.argsort(self._ez, kind="stable")
        self._ez_sorted = self._ez[order]
        self._eX = X[order]
        g = self.model.grad_mu(self._eX, self.theta)  # (N, q)
        self._eg = g
        outer = g[:, :, None] * g[:, None, :]
        n = g.shape[0]
        # tail sums: C at z = sum over z_j > z
        tail = np.concatenate([np.cumsum(outer[::-1], axis=0)[::-1], np.zeros((1, self.q, self.q))]) / n
        self._etail = tail
        self.z_lo, self.z_hi = float(self._ez_sorted[0]), float(self._ez_sorted[-1])
        if np.isfinite(self.zcap):
            eig = np.linalg.eigvalsh(self._empirical_c(np.array([self.zcap]))[0])
            if eig[0] <= 1e-12:
                raise SingularityError(f"empirical C_z singular at the guard z = {self.zcap}", where=[self.zcap])

    def _empirical_c(self, z):
        idx = np.searchsorted(self._ez_sorted, z, side="right")
        return self._etail[idx]

    def _empirical_r(self, gamma, corner):
        n = self._ez_sorted.size
        keep = self._ez_sorted <= self.zcap
        cinv = np.zeros((n, self.q, self.q))
        if np.any(keep):
            mats = self._empirical_c(self._ez_sorted[keep])
            eig = np.linalg.eigvalsh(mats)[:, 0]
            if np.any(eig <= 1e-12):
                raise SingularityError("empirical C_z singular inside the guarded range", where=self._ez_sorted[keep][eig <= 1e-12])
            cinv[keep] = np.linalg.inv(mats)
        w = np.ones(n)
        if gamma is not None:
            w = w * np.asarray(gamma(self._eX), dtype=float)
        if corner is not None:
            c = np.asarray(corner, dtype=float).ravel()
            w = w * np.all(self._eX <= c[None, :], axis=1)
        rows = np.einsum("nq,nqr->nr", self._eg * w[:, None], cinv) / n
        cum = np.concatenate([np.zeros((1, self.q)), np.cumsum(rows, axis=0)])

        def r_of(u):
            u = np.atleast_1d(np.asarray(u, dtype=float))
            if np.any(u > self.zcap + 1e-12):
                raise SingularityError(f"scan coordinate beyond the guard {self.zcap:.4g}", where=u[u > self.zcap])
            idx = np.searchsorted(self._ez_sorted, u, side="right")
            return cum[idx].T

        return r_of


def _kernel(model, fam, theta, tau=TAU) -> ScanKernel:
    return ScanKernel(model, fam, theta, tau)


def c_matrix(model: RegressionModel, fam: ScanningFamily, theta, z, tau: float = TAU) -> np.ndarray:
    """C_{theta,z} = int_{A_z^c} mu_dot mu_dot^T dH."""
    kern = _kernel(model, fam, theta, tau)
    if np.any(np.asarray(z) > kern.zcap):
        raise SingularityError(f"z beyond the guard {kern.zcap:.4g}", where=np.atleast_1d(z))
    return kern.c_matrix(z)


def k_transform(
    model: RegressionModel,
    fam: ScanningFamily,
    theta,
    gamma: Callable,
    x,
    tau: float = TAU,
    kernel: ScanKernel | None = None,
):
    """K gamma(x) = gamma(x) - R_gamma(z(x)) mu_dot(x) at each row of x."""
    kern = kernel or _kernel(model, fam, theta, tau)
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if X.shape[1] != model.p:
        X = X.T
    z_u, inv = np.unique(fam.z_of_x(X), return_inverse=True)
    r = kern.r_integral(gamma)(z_u)[:, inv.ravel()]
    md = model.grad_mu(X, kern.theta).T
    out = np.asarray(gamma(X), dtype=float) - np.sum(r * md, axis=0)
    return float(out[0]) if np.ndim(x) <= 1 and X.shape[0] == 1 else out


# ---------------------------------------------------------------------------
# w_n(B) for rectangles B = (-inf, corner]


def _clip_corner(fam: ScanningFamily, corner, zcap: float, warn: bool = True):
    c = np.asarray(corner, dtype=float).ravel().copy()
    if fam.first_coordinate and c[0] > zcap:
        if warn:
            warnings.warn(f"rectangle corner {c[0]:.4g} clipped to the guard {zcap:.4g}", stacklevel=3)
        c[0] = zcap
    return c


def w_n_set(
    model: RegressionModel,
    err_phi: Callable,
    fam: ScanningFamily,
    data,
    theta_tilde,
    corner,
    use_estimated_T: bool = True,
    theta_kernel=None,
    tau: float = TAU,
    kernel: ScanKernel | None = None,
) -> float:
    """w_n((-inf, corner]) with phi(Y - mu(X, theta_tilde)).

    The kernel uses mu_dot at theta_tilde when ``use_estimated_T`` (the
    estimated process) and at ``theta_kernel`` otherwise.
    """
    data = as_dataset(data)
    if not use_estimated_T and theta_kernel is None and kernel is None:
        raise ValidationError("theta_kernel is required when use_estimated_T is False")
    th_k = theta_tilde if use_estimated_T else theta_kernel
    kern = kernel or _kernel(model, fam, th_k, tau)
    c = _clip_corner(fam, corner, kern.zcap)
    phi = np.asarray(err_phi(model_residuals(model, theta_tilde, data)), dtype=float)
    z = fam.z_of_x(data.X)
    inside = np.all(data.X <= c[None, :], axis=1) & (z <= kern.zcap)
    r = kern.r_integral(None, c)(np.minimum(z, kern.zcap))
    md = model.grad_mu(data.X, kern.theta).T
    summand = (inside - np.sum(r * md, axis=0)) * phi
    return float(summand.sum() / np.sqrt(data.n))


def bvn_linear_c_inverse(z, r: float) -> np.ndarray:
    """Closed-form C_z^{-1} for mu = theta^T x, standard bivariate normal design, A_z = {x1 <= z}."""
    z = float(z)
    s_tail = float(special.ndtr(-z))
    a = float(gaussian_hazard(z))
    first = np.array([[r * r, -r], [-r, 1.0]]) / ((1.0 - r * r) * s_tail)
    second = np.array([[1.0 / (z * a + 1.0), 0.0], [0.0, 0.0]]) / s_tail
    return first + second


_BVN_LO = -9.0


def bvn_linear_q(u, x2, r: float, hmax: float = 0.25) -> np.ndarray:
    """Q(u, x2) = R_{1_B}(u) for B = (-inf, (inf, x2)], closed form kernel, shape (2, len(u), len(x2)).

    Q(u, x2) = int_{-inf}^{u} a(y) [ y Fc / (y a + 1) + (r / s) fc ,  -fc / s ] dy
    with s = sqrt(1 - r^2), Fc = Phi((x2 - r y) / s), fc = phi((x2 - r y) / s).
    The rectangle's own x1-limit enters by the caller taking u = min(X_i1, x1).
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    s = np.sqrt(1.0 - r * r)
    k = x2.size

    def g(y):
        a = gaussian_hazard(y)
        with np.errstate(invalid="ignore"):
            arg = (x2[:, None] - r * y[None, :]) / s
        fc_cdf = special.ndtr(arg)
        fc_pdf = np.exp(-0.5 * arg * arg) / np.sqrt(2 * np.pi)
        fc_pdf = np.where(np.isfinite(arg), fc_pdf, 0.0)
        first = a * (y * fc_cdf / (y * a + 1.0) + (r / s) * fc_pdf)
        second = -a * fc_pdf / s
        return np.concatenate([first, second], axis=0)

    vals = running_integral(g, _BVN_LO, np.maximum(u, _BVN_LO), hmax)
    vals = np.where(u[None, :] <= _BVN_LO, 0.0, vals)
    return vals.reshape(2, k, u.size).transpose(0, 2, 1)


def gaussian_bivariate_w_n(data, r: float, theta_tilde, x, phi: Callable | None = None, tau: float = TAU) -> float:
    """Closed-form kernel w_n((-inf, x]) for the linear bivariate normal model."""
    if not -1 < r < 1:
        raise ValidationError(f"correlation must lie in (-1, 1), got {r}")
    data = as_dataset(data)
    phi = phi or (lambda e: e)
    zcap = float(special.ndtri(1.0 - tau)) if tau > 0 else np.inf
    c = np.asarray(x, dtype=float).ravel().copy()
    if c[0] > zcap:
        warnings.warn(f"rectangle corner {c[0]:.4g} clipped to the guard {zcap:.4g}", stacklevel=2)
        c[0] = zcap
    X = data.X
    e = np.asarray(phi(data.y - X @ np.asarray(theta_tilde, dtype=float)), dtype=float)
    inside = (X[:, 0] <= c[0]) & (X[:, 1] <= c[1])
    u = np.minimum(X[:, 0], c[0])
    q = bvn_linear_q(u, [c[1]], r)[:, :, 0]  # (2, n)
    summand = (inside - np.sum(q * X.T, axis=0)) * e
    return float(summand.sum() / np.sqrt(data.n))


# ---------------------------------------------------------------------------
# V_n = sup over rectangles


def _sup_over_cells(x1, x2, mdot_phi, phi, u_list, v_list, qmat) -> float:
    """sup |w_n| over rectangles (-inf, (x1, x2)] with x1 in the guarded range.

    ``u_list`` (sorted, containing every guarded data x1) and ``v_list``
    (sorted, containing every data x2) are the cell boundaries; ``qmat``
    holds Q(u_j, v_k) with shape (q, J, K + 1), the last column at x2 = +inf.
    On each cell the indicator sum is constant and the kernel sum is taken at
    the four corners of the closed cell.
    """
    J, K = u_list.size, v_list.size
    q = qmat.shape[0]
    ai = np.searchsorted(u_list, x1, side="left")  # u index of the point (J if beyond guard)
    bi = np.searchsorted(v_list, x2, side="left")
    inside = ai < J
    # indicator sums on the extended grid (index 0 = -inf)
    ind = np.zeros((J + 1, K + 2))
    np.add.at(ind, (ai[inside] + 1, bi[inside] + 1), phi[inside])
    ind = np.cumsum(np.cumsum(ind, axis=0), axis=1)
    # kernel sums: prefix of Q(X_i1, v) mu_dot_i phi_i plus Q(u_j, v) * suffix
    contrib = np.zeros((J, K + 1))
    suffix_acc = np.zeros((J, q))
    qi = qmat[:, ai[inside], :]  # (q, n_in, K + 1)
    np.add.at(contrib, ai[inside], np.einsum("qik,iq->ik", qi, mdot_phi[inside]))
    np.add.at(suffix_acc, ai[inside], mdot_phi[inside])
    prefix = np.cumsum(contrib, axis=0)
    total = mdot_phi.sum(axis=0)
    suffix = total[None, :] - np.cumsum(suffix_acc, axis=0)  # (J, q)
    kern = prefix + np.einsum("qjk,jq->jk", qmat, suffix)
    kext = np.zeros((J + 1, K + 2))
    kext[1:, 1:] = kern
    best = 0.0
    # cells between x1 boundaries j and j+1 (j = 0 is (-inf, u_0))
    cells = ind[:J, : K + 1]
    for dj in (0, 1):
        for dk in (0, 1):
            corner = kext[dj : dj + J, dk : dk + K + 1]
            best = max(best, float(np.max(np.abs(cells - corner))))
    # last x1 position (u_{J-1}, the right end) and beyond: indicator at row J
    last = ind[J, : K + 1]
    for dk in (0, 1):
        best = max(best, float(np.max(np.abs(last - kext[J, dk : dk + K + 1]))))
    return best


def _refine(points: np.ndarray, k: int) -> np.ndarray:
    if k <= 0 or points.size < 2:
        return points
    gaps = np.diff(points)
    fr = np.arange(1, k + 1) / (k + 1)
    extra = (points[:-1, None] + gaps[:, None] * fr[None, :]).ravel()
    return np.unique(np.concatenate([points, extra]))


def v_n_statistic(
    model: RegressionModel,
    err_phi: Callable,
    fam: ScanningFamily,
    data,
    theta_tilde,
    tau: float = TAU,
    standardize: bool = True,
    refine: int = 0,
    closed_form: bool | None = None,
    kernel: ScanKernel | None = None,
) -> float:
    """V_n = sup over guarded rectangles of |w_n|, with phi standardized by its RMS."""
    data = as_dataset(data)
    theta_tilde = np.asarray(theta_tilde, dtype=float)
    res = model_residuals(model, theta_tilde, data)
    if np.max(np.abs(res)) <= _EXACT_FIT * max(1.0, float(np.max(np.abs(data.y)))):
        return 0.0  # exact fit: rescaling rounding noise would fabricate a statistic
    phi = np.asarray(err_phi(res), dtype=float)
    if standardize:
        s = np.sqrt(np.mean(phi * phi))
        if s > 0:
            phi = phi / s
    X = data.X
    if closed_form is None:
        closed_form = _closed_form_applies(model, fam)
    if fam.first_coordinate and data.p == 2:
        if closed_form:
            r = float(fam.design.cov[0, 1])
            zcap = float(special.ndtri(1.0 - tau)) if tau > 0 else np.inf
            qfun = lambda u, v: bvn_linear_q(u, v, r)
            th_k = theta_tilde
        else:
            kern = kernel or _kernel(model, fam, theta_tilde, tau)
            zcap = kern.zcap
            th_k = kern.theta

            def qfun(u, v):
                out = np.empty((model.q, u.size, v.size))
                for k, x2 in enumerate(v):
                    out[:, :, k] = kern.r_integral(None, (np.inf, x2))(u)
                return out

        x1, x2 = X[:, 0], X[:, 1]
        u_list = np.unique(x1[x1 <= zcap])
        if np.isfinite(zcap):
            u_list = np.unique(np.concatenate([u_list, [zcap]]))
        v_list = np.unique(x2)
        u_list = _refine(u_list, refine)
        v_list = _refine(v_list, refine)
        if u_list.size == 0:
            return 0.0
        qmat = qfun(u_list, np.concatenate([v_list, [np.inf]]))
        mdot_phi = model.grad_mu(X, th_k) * phi[:, None]
        return _sup_over_cells(x1, x2, mdot_phi, phi, u_list, v_list, qmat) / np.sqrt(data.n)
    # general families: evaluate at data corners and their left limits
    kern = kernel or _kernel(model, fam, theta_tilde, tau)
    z = fam.z_of_x(X)
    md = model.grad_mu(X, kern.theta).T
    axes = [np.unique(np.concatenate([X[:, j], [np.inf]])) for j in range(data.p)]
    grids = np.meshgrid(*axes, indexing="ij")
    corners = np.stack([g.ravel() for g in grids], axis=1)
    best = 0.0
    zc = np.minimum(z, kern.zcap)
    for c in corners:
        if fam.first_coordinate and c[0] > kern.zcap:
            c = c.copy()
            c[0] = kern.zcap
        inside = np.all(X <= c[None, :], axis=1) & (z <= kern.zcap)
        r = kern.r_integral(None, c)(zc)
        kern_part = np.sum(r * md, axis=0) * phi
        best = max(best, abs(np.sum(inside * phi - kern_part)))
        # left limit in every coordinate at once: drop boundary points
        inside_l = np.all(X < c[None, :], axis=1) & (z <= kern.zcap)
        best = max(best, abs(np.sum(inside_l * phi - kern_part)))
    return best / np.sqrt(data.n)


def _closed_form_applies(model: RegressionModel, fam: ScanningFamily) -> bool:
    des = fam.design
    if not (isinstance(des, GaussianDesign) and des.p == 2 and fam.first_coordinate):
        return False
    if not np.allclose(np.diag(des.cov), 1.0):
        return False
    if model.name != "linear" or model.q != 2:
        return False
    return True


def v_n_stat(
    model: RegressionModel,
    err_phi: Callable,
    fam: ScanningFamily,
    data,
    theta_tilde=None,
    tau: float = TAU,
    law: limit_laws.LimitLaw | None = None,
    copula_r: float | None = None,
    seed: int | None = None,
    refine: int = 0,
) -> TestReport:
    """V_n with p-value from the declared design copula's limit law."""
    data = as_dataset(data)
    if theta_tilde is None:
        theta_tilde = fit_least_squares(model, data).theta_hat
    v = v_n_statistic(model, err_phi, fam, data, theta_tilde, tau=tau, refine=refine)
    extra = {"tau": tau}
    if v <= 0.0:
        p_value = 1.0
        r_used = copula_r
    elif fam.design.p == 1:
        # Brownian motion in H(x) over H <= 1 - tau
        span = 1.0 - tau if tau > 0 else 1.0
        p_value = limit_laws.sup_bm_sf(v / np.sqrt(span))
        r_used = None
    else:
        if copula_r is None:
            if isinstance(fam.design, GaussianDesign):
                cov = fam.design.cov
                copula_r = float(cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]))
            else:
                copula_r = float(np.corrcoef(data.X[:, 0], data.X[:, 1])[0, 1])
                extra["copula_r_source"] = "sample correlation"
        r_used = copula_r
        if law is None:
            law = limit_laws.l_r_cdf(copula_r)
        p_value = float(law.pvalue(v))
    if not fam.design.analytic:
        extra["design"] = "empirical plug-in"
    return TestReport(
        statistic="V_n",
        value=v,
        p_value=p_value,
        theta_hat=np.asarray(theta_tilde, dtype=float),
        n=data.n,
        seed=seed,
        copula_r=r_used,
        extra=extra,
    )
