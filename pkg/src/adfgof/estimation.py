"""Regression models, M-estimation / MLE solvers, residuals and scale."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .error_models import ErrorModel
from .errors import ConvergenceError, DegenerateScaleError, SingularityError, ValidationError

GTOL = 1e-8
MAX_ITER = 200
MIN_EIG = 1e-10


@dataclass(frozen=True)
class Dataset:
    """Design matrix ``X`` (n, p) and responses ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValidationError(f"design has {X.shape[0]} rows but y has {y.size} entries")
        if y.size == 0:
            raise ValidationError("empty dataset")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("dataset contains non-finite values")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def replicate(self, k: int) -> "Dataset":
        return Dataset(np.tile(self.X, (k, 1)), np.tile(self.y, k))


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    X, y = data
    return Dataset(X, y)


class RegressionModel:
    """Regression function mu(x, theta) with gradient in theta.

    ``mu(X, theta)`` maps an (n, p) design to (n,) and ``grad_mu(X, theta)``
    to (n, q).  ``initial_guess(data)`` supplies a warm start for the solvers.
    """

    def __init__(
        self,
        mu: Callable,
        grad_mu: Callable,
        p: int,
        q: int,
        name: str = "custom",
        initial_guess: Callable | None = None,
    ):
        self._mu = mu
        self._grad = grad_mu
        self.p = int(p)
        self.q = int(q)
        self.name = name
        self._init = initial_guess

    def mu(self, X, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self._mu(X, np.asarray(theta, dtype=float)), dtype=float).reshape(X.shape[0])

    def grad_mu(self, X, theta) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        g = np.asarray(self._grad(X, np.asarray(theta, dtype=float)), dtype=float)
        return g.reshape(X.shape[0], self.q)

    def initial_guess(self, data: Dataset) -> np.ndarray:
        if self._init is not None:
            return np.asarray(self._init(data), dtype=float).reshape(self.q)
        return np.zeros(self.q)

    def check_dims(self, data: Dataset) -> None:
        if data.p != self.p:
            raise ValidationError(f"model {self.name!r} expects p = {self.p}, data has p = {data.p}")
        if data.n <= self.q:
            raise ValidationError(f"need n > q = {self.q}, got n = {data.n}")

    def gradient_check(self, X, theta, delta: float = 1e-5) -> float:
        """Largest finite-difference mismatch |mu(th + d e_j) - mu - d grad_j| / (1 + |mu|)."""
        theta = np.asarray(theta, dtype=float)
        base = self.mu(X, theta)
        grad = self.grad_mu(X, theta)
        worst = 0.0
        for j in range(self.q):
            step = np.zeros(self.q)
            step[j] = delta
            diff = self.mu(X, theta + step) - base - delta * grad[:, j]
            worst = max(worst, float(np.max(np.abs(diff) / (1.0 + np.abs(base)))))
        return worst

    def gram(self, X, theta) -> np.ndarray:
        """Empirical C = n^{-1} sum mu_dot mu_dot^T."""
        g = self.grad_mu(X, theta)
        return g.T @ g / g.shape[0]


def linear_model(p: int) -> RegressionModel:
    """mu(x, theta) = theta^T x (no implicit intercept)."""

    def init(data):
        return np.linalg.lstsq(data.X, data.y, rcond=None)[0]

    return RegressionModel(
        mu=lambda X, th: X @ th,
        grad_mu=lambda X, th: X,
        p=p,
        q=p,
        name="linear",
        initial_guess=init,
    )


def exponential_model() -> RegressionModel:
    """mu(x, theta) = exp(theta x), scalar design and parameter."""

    def init(data):
        x = data.X[:, 0]
        ok = data.y > 0
        if np.count_nonzero(ok) >= 1 and np.sum(x[ok] ** 2) > 0:
            return np.array([np.sum(x[ok] * np.log(data.y[ok])) / np.sum(x[ok] ** 2)])
        return np.zeros(1)

    return RegressionModel(
        mu=lambda X, th: np.exp(th[0] * X[:, 0]),
        grad_mu=lambda X, th: (X[:, 0] * np.exp(th[0] * X[:, 0]))[:, None],
        p=1,
        q=1,
        name="exponential",
        initial_guess=init,
    )


def builtin_model(name: str, p: int) -> RegressionModel:
    if name == "linear":
        return linear_model(p)
    if name == "exponential":
        if p != 1:
            raise ValidationError("the exponential model needs exactly one design column")
        return exponential_model()
    raise ValidationError(f"unknown model {name!r} (built-ins: linear, exponential)")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    sigma_hat: float | None
    iterations: int
    converged: bool
    final_gradient_norm: float
    message: str = ""
    history: list = field(default_factory=list, repr=False)


def residuals(model: RegressionModel, theta, data) -> np.ndarray:
    data = as_dataset(data)
    return data.y - model.mu(data.X, theta)


def fit_scale(res) -> float:
    """sigma_hat = sqrt(mean(res^2))."""
    res = np.asarray(res, dtype=float)
    if res.size < 2:
        raise ValidationError("fit_scale needs at least two residuals")
    s = float(np.sqrt(np.mean(res * res)))
    if s == 0.0:
        raise DegenerateScaleError("all residuals are zero; scale is degenerate")
    return s


def _check_rank(gram: np.ndarray) -> None:
    eig = np.linalg.eigvalsh(gram)
    if eig[0] <= MIN_EIG * max(1.0, eig[-1]):
        raise SingularityError(
            f"gradient Gram matrix is rank deficient (smallest eigenvalue {eig[0]:.3e})", where=eig
        )


def _newton(equation, jacobian, theta0, gtol, max_iter):
    """Damped Newton on U(theta) = 0 with backtracking on ||U||^2."""
    theta = np.asarray(theta0, dtype=float).copy()
    u = equation(theta)
    norm = float(np.linalg.norm(u))
    it = 0
    while norm > gtol and it < max_iter:
        it += 1
        step = np.linalg.solve(jacobian(theta), u)
        lam = 1.0
        for _ in range(60):
            cand = theta - lam * step
            with np.errstate(all="ignore"):
                u_c = equation(cand)
            n_c = float(np.linalg.norm(u_c))
            if np.isfinite(n_c) and n_c < norm:
                break
            lam *= 0.5
        else:
            raise ConvergenceError(
                f"line search failed at |U/n| = {norm:.3e}", last_iterate=theta, iterations=it
            )
        theta, u, norm = cand, u_c, n_c
    if norm > gtol:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations (|U/n| = {norm:.3e})",
            last_iterate=theta,
            iterations=it,
        )
    return theta, it, norm


def fit_mle(
    model: RegressionModel,
    err: ErrorModel,
    data,
    theta0=None,
    gtol: float = GTOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Root of n^{-1} sum mu_dot(X_i) psi_f(eps_i) by Fisher scoring."""
    data = as_dataset(data)
    model.check_dims(data)
    theta0 = model.initial_guess(data) if theta0 is None else np.asarray(theta0, dtype=float)
    info = err.fisher_info
    _check_rank(model.gram(data.X, theta0))

    def equation(th):
        return model.grad_mu(data.X, th).T @ err.score(residuals(model, th, data)) / data.n

    def jacobian(th):
        gram = model.gram(data.X, th)
        _check_rank(gram)
        return info * gram

    theta, it, norm = _newton(equation, jacobian, theta0, gtol, max_iter)
    return FitResult(theta, None, it, True, norm)


def fit_least_squares(model: RegressionModel, data, theta0=None, gtol=GTOL, max_iter=MAX_ITER):
    """Gauss-Newton least squares (the MLE under standard Gaussian errors)."""
    data = as_dataset(data)
    model.check_dims(data)
    theta0 = model.initial_guess(data) if theta0 is None else np.asarray(theta0, dtype=float)
    _check_rank(model.gram(data.X, theta0))

    def equation(th):
        return -model.grad_mu(data.X, th).T @ residuals(model, th, data) / data.n

    def jacobian(th):
        gram = model.gram(data.X, th)
        _check_rank(gram)
        return gram

    theta, it, norm = _newton(equation, jacobian, theta0, gtol, max_iter)
    return FitResult(theta, fit_scale(residuals(model, theta, data)) if data.n > 1 else None, it, True, norm)


def _mad(x: np.ndarray) -> float:
    return float(np.median(np.abs(x - np.median(x))))


def fit_mestimator(
    model: RegressionModel,
    data,
    phi: Callable,
    eta: Callable | None = None,
    centering: float | None = None,
    err: ErrorModel | None = None,
    nonsmooth: bool = False,
    theta0=None,
    gtol: float = GTOL,
    max_iter: int = MAX_ITER,
) -> FitResult:
    """Root of n^{-1} sum eta(X_i) [phi(eps_i) - c], c = int phi dF.

    ``eta`` defaults to the model gradient.  The centering ``c`` is taken
    from ``centering`` if given, else computed from ``err``, else 0.  With
    ``nonsmooth=True`` the derivative of phi is replaced by a secant over the
    bandwidth n^{-1/5} MAD(residuals), and a scalar parameter falls back to
    bisection on the sign change of the estimating equation.
    """
    data = as_dataset(data)
    model.check_dims(data)
    eta = eta or (lambda X, th: model.grad_mu(X, th))
    if centering is None:
        centering = err.expect(phi) if err is not None else 0.0
    theta0 = model.initial_guess(data) if theta0 is None else np.asarray(theta0, dtype=float)

    def equation(th):
        e = np.asarray(eta(data.X, th), dtype=float).reshape(data.n, model.q)
        return e.T @ (np.asarray(phi(residuals(model, th, data)), dtype=float) - centering) / data.n

    def slope_weights(th):
        res = residuals(model, th, data)
        if nonsmooth:
            h = data.n ** (-0.2) * _mad(res)
            if h <= 0:
                h = data.n ** (-0.2) * max(np.std(res), 1e-8)
        else:
            h = 1e-6 * max(1.0, float(np.max(np.abs(res))))
        return (np.asarray(phi(res + h), dtype=float) - np.asarray(phi(res - h), dtype=float)) / (2 * h)

    def jacobian(th):
        e = np.asarray(eta(data.X, th), dtype=float).reshape(data.n, model.q)
        g = model.grad_mu(data.X, th)
        return -(e * slope_weights(th)[:, None]).T @ g / data.n

    if not nonsmooth:
        theta, it, norm = _newton(equation, jacobian, theta0, gtol, max_iter)
        return FitResult(theta, None, it, True, norm)
    return _fit_nonsmooth(equation, jacobian, theta0, model.q, gtol, max_iter)


def _fit_nonsmooth(equation, jacobian, theta0, q, gtol, max_iter) -> FitResult:
    theta = np.asarray(theta0, dtype=float).copy()
    it = 0
    for it in range(1, max_iter + 1):
        u = equation(theta)
        if np.linalg.norm(u) <= gtol:
            return FitResult(theta, None, it, True, float(np.linalg.norm(u)))
        try:
            step = np.linalg.solve(jacobian(theta), u)
        except np.linalg.LinAlgError:
            break
        theta = theta - step
        if np.linalg.norm(step) <= 1e-10 * (1.0 + np.linalg.norm(theta)):
            break
    if q == 1:
        theta = _bisect_scalar(equation, theta[0])
    norm = float(np.linalg.norm(equation(theta)))
    ok = norm <= gtol
    msg = "" if ok else "estimating equation has no exact root; returned its sign-change point"
    return FitResult(theta, None, it, ok, norm, message=msg)


def _bisect_scalar(equation, start: float) -> np.ndarray:
    f = lambda x: float(equation(np.array([x]))[0])
    f0 = f(start)
    if f0 == 0.0:
        return np.array([start])
    width = max(1.0, abs(start))
    lo = hi = start
    for _ in range(200):
        lo, hi = start - width, start + width
        if np.sign(f(lo)) != np.sign(f(hi)):
            break
        width *= 2.0
    else:
        raise ConvergenceError("no sign change found for the estimating equation", last_iterate=start)
    flo = f(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return np.array([mid])
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(mid)):
            break
    return np.array([0.5 * (lo + hi)])
