"""Residual empirical processes, their martingale transforms and test statistics.

All processes here have the form

    X(z) = n^{-1/2} [ sum_i w_i 1{e_i <= z} - C(z) ]

indexed by t = F(z).  Untransformed processes compensate with a smooth
deterministic term C(z) = n m(z); transformed processes use
C(z) = sum_i s_i^T V(min(z, e_i)) with s_i = h(e_i) and V = G or J.  Between
consecutive sorted residuals the latter equals P_k + S_k^T V(z) with a prefix
sum P_k and a suffix sum S_k, so a whole path costs O(n + grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import limit_laws
from .error_models import ErrorModel, PhiFamily
from .errors import DegenerateWeightError, ValidationError
from .estimation import RegressionModel, as_dataset, fit_mle, residuals as model_residuals
from .quadrature import CumulativeIntegral
from .reports import TestReport
from .transform_core import CompensatorKernel, compensator_kernel

REFINE = 512
SIGN_CONVENTIONS = ("general", "eq71")
SUP_RULES = ("exact", "residuals")


@dataclass
class ProcessPath:
    """A right-continuous path on [0, 1] with explicit left limits.

    ``t`` is nondecreasing (strictly, except where double precision cannot
    separate F-values in the extreme tail); ``value[j]`` is the value at
    ``t[j]`` and ``left[j]`` the left limit there (equal to ``value[j]`` away
    from residual atoms).
    """

    t: np.ndarray
    value: np.ndarray
    left: np.ndarray
    name: str = ""
    z: np.ndarray | None = field(default=None, repr=False)
    atoms: np.ndarray | None = field(default=None, repr=False)

    @property
    def statistic_sup(self) -> float:
        return float(max(np.max(np.abs(self.value)), np.max(np.abs(self.left))))

    @property
    def statistic_sup_residuals(self) -> float:
        """max |X(e_i)| over the residual atoms only (right values, no left limits)."""
        if self.atoms is None or not np.any(self.atoms):
            raise ValidationError("path carries no residual atoms")
        return float(np.max(np.abs(self.value[self.atoms])))

    def sup(self, rule: str = "exact") -> float:
        """Sup statistic: ``exact`` over the whole path, ``residuals`` at the atoms only."""
        if rule == "exact":
            return self.statistic_sup
        if rule == "residuals":
            return self.statistic_sup_residuals
        raise ValidationError(f"sup_rule must be one of {SUP_RULES}")

    @property
    def statistic_cvm(self) -> float:
        """int_0^1 X(t)^2 dt, trapezoid between right values and the next left limits."""
        dt = np.diff(self.t)
        return float(np.sum(0.5 * (self.value[:-1] ** 2 + self.left[1:] ** 2) * dt))

    def at(self, t) -> np.ndarray:
        """Right-continuous lookup at arbitrary t (nearest tabulated point to the left)."""
        idx = np.searchsorted(self.t, np.asarray(t, dtype=float), side="right") - 1
        return self.value[np.clip(idx, 0, self.t.size - 1)]


def _check_residuals(res) -> np.ndarray:
    res = np.asarray(res, dtype=float).ravel()
    if res.size == 0:
        raise ValidationError("empty residual vector")
    if not np.all(np.isfinite(res)):
        raise ValidationError("residuals must be finite")
    return res


def _refine_t(t_lo: float, t_hi: float, k: int) -> np.ndarray:
    return t_lo + (t_hi - t_lo) * np.arange(1, k + 1) / (k + 1)


def _z_of_t(err: ErrorModel, t: np.ndarray, lo: float, hi: float) -> np.ndarray:
    inner = (t > 0) & (t < 1)
    z = np.full(t.shape, lo)
    if np.any(inner):
        z[inner] = err.quantile(t[inner])
    return np.clip(z, lo, hi)


def _grid(err: ErrorModel, e_sorted: np.ndarray, refine: int, tail: bool):
    """Evaluation layout: refinement points per gap and atom positions.

    Returns (t, z, kind, gap) where kind is 0 for refinement points and 1 for
    atoms, and gap is the number of atoms strictly to the left.
    """
    t_atoms = err.cdf(e_sorted)
    t_prev = np.concatenate(([0.0], t_atoms))
    ts, zs, kinds, gaps = [np.array([0.0])], [np.array([-np.inf])], [np.array([0])], [np.array([0])]
    n = e_sorted.size
    for k in range(n + (1 if tail else 0)):
        lo_t = t_prev[k]
        hi_t = t_atoms[k] if k < n else 1.0
        lo_z = e_sorted[k - 1] if k > 0 else -np.inf
        hi_z = e_sorted[k] if k < n else np.inf
        if refine and hi_t > lo_t:
            tr = _refine_t(lo_t, hi_t, refine)
            zr = _z_of_t(err, tr, lo_z, hi_z)
            keep = (zr > lo_z) & (zr < hi_z)
            ts.append(tr[keep])
            zs.append(zr[keep])
            kinds.append(np.zeros(np.count_nonzero(keep), dtype=int))
            gaps.append(np.full(np.count_nonzero(keep), k))
        if k < n:
            ts.append(np.array([t_atoms[k]]))
            zs.append(np.array([e_sorted[k]]))
            kinds.append(np.array([1]))
            gaps.append(np.array([k]))
    if tail:
        ts.append(np.array([1.0]))
        zs.append(np.array([np.inf]))
        kinds.append(np.array([0]))
        gaps.append(np.array([n]))
    return (np.concatenate(ts), np.concatenate(zs), np.concatenate(kinds), np.concatenate(gaps))


def _group_atoms(res: np.ndarray, w: np.ndarray, extra=None):
    """Sort residuals and merge ties, summing their weights (and extra rows)."""
    order = np.argsort(res, kind="stable")
    e = res[order]
    uniq, start = np.unique(e, return_index=True)
    wsum = np.add.reduceat(w[order], start)
    esum = None
    if extra is not None:
        esum = np.add.reduceat(extra[:, order], start, axis=1)
    return uniq, wsum, esum


def smooth_compensated_path(
    err: ErrorModel,
    res,
    weights,
    mean_fn: Callable,
    name: str,
    refine: int = REFINE,
) -> ProcessPath:
    """n^{-1/2} sum_i [w_i 1{e_i <= z} - m(z)] with smooth m, on t = F(z)."""
    res = _check_residuals(res)
    n = res.size
    w = np.broadcast_to(np.asarray(weights, dtype=float), res.shape).astype(float)
    e, wsum, _ = _group_atoms(res, w)
    t, z, kind, gap = _grid(err, e, refine, tail=True)
    counts = np.concatenate(([0.0], np.cumsum(wsum)))
    comp = np.zeros(t.size)
    finite = np.isfinite(z)
    comp[finite] = n * mean_fn(z[finite])
    comp[z == np.inf] = n * mean_fn(np.array([np.inf]))[0]
    right = counts[gap + kind] - comp
    left = counts[gap] - comp
    scale = 1.0 / np.sqrt(n)
    return ProcessPath(t, right * scale, left * scale, name, z, kind == 1)


def u_hat_1(err: ErrorModel, res, refine: int = REFINE) -> ProcessPath:
    """Classical residual empirical process n^{-1/2} sum [1{e_i <= z} - F(z)]."""
    return smooth_compensated_path(
        err, res, 1.0, lambda z: np.where(np.isinf(z), 1.0, err.cdf(z)), "u_hat_1", refine
    )


def _phi_mean(err: ErrorModel, phi: Callable, breakpoints=()):
    """z -> int_{y <= z} phi dF, tabulated."""
    lo, hi = err.support(1e-15)
    nodes = np.linspace(lo, hi, 2048)
    bps = np.atleast_1d(np.asarray(breakpoints, dtype=float))
    bps = bps[(bps > lo) & (bps < hi)]
    if bps.size:
        nodes = np.unique(np.concatenate([nodes, bps]))
    cum = CumulativeIntegral(lambda y: np.asarray(phi(y), dtype=float) * err.pdf(y), nodes)
    total = cum.table[0, -1]

    def mean(z):
        z = np.asarray(z, dtype=float)
        out = cum(np.clip(z, lo, hi))[0]
        return np.where(z <= lo, 0.0, np.where(z >= hi, total, out))

    return mean


def xi_phi(err: ErrorModel, res, phi_family: PhiFamily, refine: int = REFINE, time_scale: str = "F"):
    """n^{-1/2} sum [phi(e_i) 1{e_i <= z} - int_{y <= z} phi dF].

    ``time_scale='F'`` indexes the path by t = F(z); ``'L'`` re-indexes it by
    t = L(z) so that the limit has variance t.
    """
    if time_scale not in ("F", "L"):
        raise ValidationError("time_scale must be 'F' or 'L'")
    res = _check_residuals(res)
    phi = phi_family.base
    path = smooth_compensated_path(
        err, res, phi(res), _phi_mean(err, phi, phi_family.breakpoints), "xi_phi", refine
    )
    if time_scale == "L":
        t = np.where(np.isneginf(path.z), 0.0, np.where(np.isposinf(path.z), 1.0, 0.0))
        mid = np.isfinite(path.z)
        t[mid] = phi_family.L(path.z[mid])
        path = ProcessPath(t, path.value, path.left, "xi_phi", path.z, path.atoms)
    return path


def transformed_path(
    err: ErrorModel,
    res,
    kernel: CompensatorKernel,
    weights,
    scores: np.ndarray,
    name: str,
    refine: int = REFINE,
) -> ProcessPath:
    """n^{-1/2} sum_i [w_i 1{e_i <= z} - s_i^T V(min(z, e_i))] on t = F(z).

    ``scores`` has shape (dim, n).  V is exact at residual atoms and cubic
    Hermite at refinement points.  The path is constant after the largest
    residual and ends with the point t = 1.
    """
    res = _check_residuals(res)
    n = res.size
    kernel.check(res)
    w = np.broadcast_to(np.asarray(weights, dtype=float), res.shape).astype(float)
    e, wsum, ssum = _group_atoms(res, w, scores)
    m = e.size
    v_atoms = kernel(e)  # (dim, m)
    contrib = np.sum(ssum * v_atoms, axis=0)
    prefix = np.concatenate(([0.0], np.cumsum(contrib)))
    suffix = np.concatenate([np.cumsum(ssum[:, ::-1], axis=1)[:, ::-1], np.zeros((ssum.shape[0], 1))], axis=1)
    counts = np.concatenate(([0.0], np.cumsum(wsum)))

    t, z, kind, gap = _grid(err, e, refine, tail=False)
    comp = np.zeros(t.size)
    refine_pts = (kind == 0) & np.isfinite(z)
    if np.any(refine_pts):
        zr = np.maximum(z[refine_pts], kernel.lo)
        vr = np.where(z[refine_pts] < kernel.lo, 0.0, kernel.interp(zr))
        g = gap[refine_pts]
        comp[refine_pts] = prefix[g] + np.sum(suffix[:, g] * vr, axis=0)
    atom = kind == 1
    if np.any(atom):
        g = gap[atom]  # atom index k, atoms strictly left = k
        comp[atom] = prefix[g] + np.sum(suffix[:, g] * v_atoms[:, g], axis=0)
    right = counts[gap + kind] - comp
    left = counts[gap] - comp
    # t = 1 endpoint: everything saturated
    t = np.concatenate([t, [1.0]])
    z = np.concatenate([z, [np.inf]])
    final = counts[m] - prefix[m]
    right = np.concatenate([right, [final]])
    left = np.concatenate([left, [final]])
    scale = 1.0 / np.sqrt(n)
    return ProcessPath(t, right * scale, left * scale, name, z, np.concatenate([kind == 1, [False]]))


def _location_scores(err: ErrorModel, res, kernel: CompensatorKernel, sign_convention: str):
    if sign_convention not in SIGN_CONVENTIONS:
        raise ValidationError(f"sign_convention must be one of {SIGN_CONVENTIONS}")
    s = kernel.score(res)
    if sign_convention == "eq71":
        s = s.copy()
        s[1] = -s[1]
    return s


def w_hat_n1(
    err: ErrorModel,
    res,
    sign_convention: str = "general",
    refine: int = REFINE,
    method: str = "auto",
) -> ProcessPath:
    """n^{-1/2} sum [1{e_i <= z} - h(e_i)^T G(min(z, e_i))]; sup is D_n."""
    res = _check_residuals(res)
    kernel = compensator_kernel(err, 2, method=method)
    scores = _location_scores(err, res, kernel, sign_convention)
    return transformed_path(err, res, kernel, 1.0, scores, "w_hat_n1", refine)


def w_hat_n2(
    err: ErrorModel,
    res,
    phi: Callable,
    breakpoints=(),
    sign_convention: str = "general",
    refine: int = REFINE,
    method: str = "auto",
) -> ProcessPath:
    """n^{-1/2} sum [phi(e_i) 1{e_i <= z} - h(e_i)^T J(min(z, e_i))]."""
    res = _check_residuals(res)
    kernel = compensator_kernel(err, 2, phi, breakpoints, method)
    scores = _location_scores(err, res, kernel, sign_convention)
    return transformed_path(err, res, kernel, phi(res), scores, "w_hat_n2", refine)


def w_n_scale(
    err: ErrorModel,
    res,
    sigma_hat: float,
    phi: Callable | None = None,
    breakpoints=(),
    refine: int = REFINE,
    method: str = "auto",
) -> ProcessPath:
    """Location-scale transformed process on standardized residuals r = e / sigma_hat.

    Indexed by t = F(r).  With h_sigma^T G_sigma(y) = h3(r)^T G_1(y / sigma) the
    whole computation runs on the unit-scale 3-dim kernel.
    """
    if not np.isfinite(sigma_hat) or sigma_hat <= 0:
        raise ValidationError(f"sigma_hat must be positive, got {sigma_hat}")
    r = _check_residuals(res) / sigma_hat
    kernel = compensator_kernel(err, 3, phi, breakpoints, method)
    weights = 1.0 if phi is None else phi(r)
    name = "w_n1_scale" if phi is None else "w_n2_scale"
    return transformed_path(err, r, kernel, weights, kernel.score(r), name, refine)


def projection_weights(model: RegressionModel, X, theta_hat) -> np.ndarray:
    """1_perp,n(X_i) / ||1_perp,n||_n."""
    grad = model.grad_mu(X, theta_hat)
    n = grad.shape[0]
    gram = grad.T @ grad / n
    mbar = grad.mean(axis=0)
    coef = np.linalg.solve(gram, mbar)
    norm2 = 1.0 - float(mbar @ coef)
    if norm2 <= 1e-10:
        raise DegenerateWeightError(
            f"||1_perp||_n^2 = {norm2:.3e}: the regression function spans the constants"
        )
    return (1.0 - grad @ coef) / np.sqrt(norm2)


def u_hat_n_projection(model: RegressionModel, err: ErrorModel, data, theta_hat, refine: int = REFINE):
    """Projection-weighted residual empirical process (Brownian bridge limit)."""
    data = as_dataset(data)
    w = projection_weights(model, data.X, theta_hat)
    res = model_residuals(model, theta_hat, data)
    path = smooth_compensated_path(
        err, res, w, lambda z: np.where(np.isinf(z), 1.0, err.cdf(z)) * np.mean(w), "u_hat_n", refine
    )
    return path


def bridge_pvalue(path: ProcessPath) -> float:
    """Kolmogorov p-value for a Brownian-bridge-limit path."""
    return float(stats.kstwobign.sf(path.statistic_sup))


def test_error_distribution(
    model: RegressionModel,
    err: ErrorModel,
    data,
    sign_convention: str = "general",
    theta0=None,
    seed: int | None = None,
    refine: int = REFINE,
    sup_rule: str = "exact",
) -> TestReport:
    """Fit by MLE, transform the residual process and report D_n with its p-value.

    ``sup_rule='residuals'`` takes the maximum over the residuals only, a
    slightly smaller statistic than the exact supremum for small n.
    """
    data = as_dataset(data)
    fit = fit_mle(model, err, data, theta0=theta0)
    res = model_residuals(model, fit.theta_hat, data)
    path = w_hat_n1(err, res, sign_convention=sign_convention, refine=refine)
    d_n = path.sup(sup_rule)
    return TestReport(
        statistic="D_n",
        value=d_n,
        p_value=limit_laws.sup_bm_sf(d_n),
        theta_hat=fit.theta_hat,
        n=data.n,
        seed=seed,
        sign_convention=sign_convention,
        extra={} if sup_rule == "exact" else {"sup_rule": sup_rule},
        path=path,
    )


test_error_distribution.__test__ = False
