"""Null limit laws: sup |W| on [0, 1] and the 2-D field law L_r.

The 1-D law has an analytic alternating series and an independent check via
the exact non-crossing probability of a compensated Poisson path.  L_r has no
closed form and is tabulated by simulating the Poisson field
(xi(s, t) - n H_r(s, t)) / sqrt(n) for a Gaussian copula H_r.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special, stats

from .errors import ValidationError
from .seeds import rep_rng

_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
_TWO_PI = 2.0 * np.pi
CACHE_ENV = "ADFGOF_CACHE_DIR"
CACHE_VERSION = 1


# ---------------------------------------------------------------------------
# LimitLaw


@dataclass
class LimitLaw:
    """Tabulated CDF with quantile and p-value lookup.

    ``x`` is sorted and ``cdf`` nondecreasing.  For simulated laws ``x`` holds
    the sorted statistics and ``cdf`` the e.d.f. heights (i / m).
    """

    kind: str
    x: np.ndarray
    cdf_values: np.ndarray
    source: str
    params: dict = field(default_factory=dict)

    def cdf(self, v):
        v = np.asarray(v, dtype=float)
        if self.source == "simulation":
            out = np.searchsorted(self.x, v, side="right") / self.x.size
        else:
            out = np.interp(v, self.x, self.cdf_values, left=0.0, right=1.0)
        return out if out.ndim else float(out)

    def pvalue(self, v):
        return 1.0 - self.cdf(v)

    def quantile(self, alpha: float) -> float:
        """Upper-alpha point: x with 1 - P(x) = alpha, linear between table rows."""
        return quantile_lookup(self, alpha)


def quantile_lookup(law: LimitLaw, alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must lie in (0, 1), got {alpha}")
    level = 1.0 - alpha
    if law.source == "simulation":
        # e.d.f. heights at the sorted sample, interpolated linearly
        heights = np.arange(1, law.x.size + 1) / law.x.size
        if level < heights[0] or level > heights[-1]:
            raise ValidationError(f"alpha = {alpha} outside the simulated table")
        return float(np.interp(level, heights, law.x))
    p = law.cdf_values
    if level < p[0] or level > p[-1]:
        raise ValidationError(f"alpha = {alpha} outside the tabulated range")
    # collapse flat stretches so interpolation in p is well defined
    keep = np.concatenate(([True], np.diff(p) > 0))
    return float(np.interp(level, p[keep], law.x[keep]))


# ---------------------------------------------------------------------------
# 1-D law of sup |W|


def _sup_bm_cdf_scalar(x: float) -> float:
    if x < 1.0:
        # theta-function form converges fast for small x
        k = np.arange(0, 50)
        m = 2 * k + 1
        terms = (-1.0) ** k / m * np.exp(-(np.pi**2) * m**2 / (8.0 * x * x))
        return float(min(1.0, max(0.0, 4.0 / np.pi * np.sum(terms))))
    return 1.0 - _sup_bm_sf_scalar(x)


def _sup_bm_sf_scalar(x: float) -> float:
    # 1 - sum_k (-1)^k [Phi((2k+1)x) - Phi((2k-1)x)] = 4 sum_j (-1)^j Phi(-(2j+1)x)
    total = 0.0
    for j in range(200):
        term = (-1.0) ** j * special.ndtr(-(2 * j + 1) * x)
        total += term
        if abs(term) < 1e-18:
            break
    return float(4.0 * total)


def sup_bm_cdf_series(x) -> float:
    """P(sup_{0<=t<=1} |W(t)| <= x) by the alternating normal series."""
    x = float(x)
    if not x > 0:
        raise ValidationError(f"x must be positive, got {x}")
    return _sup_bm_cdf_scalar(x)


def sup_bm_sf(x) -> float:
    """P(sup |W| > x); 1 for x <= 0."""
    x = float(x)
    if x <= 0:
        return 1.0
    if x < 1.0:
        return 1.0 - _sup_bm_cdf_scalar(x)
    return min(1.0, max(0.0, _sup_bm_sf_scalar(x)))


def sup_bm_law(x_max: float = 5.0, n_points: int = 2001) -> LimitLaw:
    x = np.linspace(0.0, x_max, n_points)
    p = np.array([0.0] + [sup_bm_cdf_series(v) for v in x[1:]])
    return LimitLaw("sup_bm_1d", x, p, "series", {})


def sup_bm_cdf_poisson(x, n_intensity: int) -> float:
    """P(|N(t) - n t| <= x sqrt(n) for all t in [0, 1]), N a rate-n Poisson process.

    Forward recursion over event counts between the times where a boundary
    n t +- c crosses an integer: counts above the upper boundary are removed
    at the end of each step (paths are monotone), and count k is removed when
    the lower boundary reaches it at t = (k + c) / n.
    """
    x = float(x)
    n = int(n_intensity)
    if not x > 0:
        raise ValidationError(f"x must be positive, got {x}")
    if n < 1:
        raise ValidationError("n_intensity must be positive")
    c = x * np.sqrt(n)
    top = int(np.floor(n + c)) + 2
    k = np.arange(0, top + 1)
    up = (k - c) / n  # upper limit rises to k at this time
    low = (k + c) / n  # count k is excluded from this time on
    times = np.concatenate([up[(up > 0) & (up < 1)], low[(low > 0) & (low < 1)], [1.0]])
    is_low = np.concatenate(
        [np.zeros(np.count_nonzero((up > 0) & (up < 1)), bool), np.ones(np.count_nonzero((low > 0) & (low < 1)), bool), [False]]
    )
    order = np.argsort(times, kind="stable")
    times, is_low = times[order], is_low[order]

    p = np.zeros(top + 2)
    p[0] = 1.0
    lo_idx, hi_idx = 0, 0  # support of p
    t_prev = 0.0
    pmf_cache: dict = {}
    for t, lower in zip(times, is_low):
        lam = n * (t - t_prev)
        ub = int(np.floor(n * t_prev + c + 1e-9))
        if lam > 0:
            ub = min(ub, top)
            width = ub - lo_idx + 1
            if width <= 0:
                return 0.0
            key = (round(lam, 12), width)
            pmf = pmf_cache.get(key)
            if pmf is None:
                pmf = stats.poisson.pmf(np.arange(width), lam)
                pmf_cache[key] = pmf
            seg = np.convolve(p[lo_idx : hi_idx + 1], pmf)[:width]
            p[lo_idx:] = 0.0
            p[lo_idx : lo_idx + seg.size] = seg
            hi_idx = lo_idx + seg.size - 1
        if lower:
            kl = int(round(n * t - c))
            if kl >= lo_idx:
                p[lo_idx : kl + 1] = 0.0
                lo_idx = kl + 1
                if lo_idx > hi_idx:
                    return 0.0
        t_prev = t
    final_lo = int(np.ceil(n - c - 1e-9))
    final_hi = int(np.floor(n + c + 1e-9))
    return float(np.clip(p[max(final_lo, 0) : final_hi + 1].sum(), 0.0, 1.0))


# ---------------------------------------------------------------------------
# bivariate normal and the Gaussian copula


def _bvnu(h, k, r):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r (Genz)."""
    h, k = np.broadcast_arrays(np.asarray(h, dtype=float), np.asarray(k, dtype=float))
    h, k = h.copy(), k.copy()
    out = np.empty(h.shape)
    hk = h * k
    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = np.arcsin(r)
        sn = np.sin(asr * 0.5 * (1.0 + _GL_X))
        terms = np.exp((sn[:, None] * hk.ravel() - hs.ravel()) / (1.0 - sn[:, None] ** 2))
        val = asr / (2.0 * _TWO_PI) * (_GL_W @ terms)
        out = val.reshape(h.shape) + special.ndtr(-h) * special.ndtr(-k)
        return out
    if r < 0:
        k = -k
        hk = -hk
    a2 = (1.0 - r) * (1.0 + r)
    a = np.sqrt(a2)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr = -0.5 * (bs / a2 + hk)
    with np.errstate(all="ignore"):
        bvn = np.where(
            asr > -100,
            a * np.exp(asr) * (1.0 - c * (bs - a2) * (1.0 - d * bs / 5.0) / 3.0 + c * d * a2 * a2 / 5.0),
            0.0,
        )
        b = np.sqrt(bs)
        corr = np.exp(-0.5 * hk) * np.sqrt(_TWO_PI) * special.ndtr(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0)
        bvn = bvn - np.where(-hk < 100, corr, 0.0)
        ah = 0.5 * a
        xs = (ah * (_GL_X + 1.0)) ** 2  # (20,)
        rs = np.sqrt(1.0 - xs)
        flat_bs, flat_hk = bs.ravel(), hk.ravel()
        flat_c, flat_d = c.ravel(), d.ravel()
        asr2 = -0.5 * (flat_bs[None, :] / xs[:, None] + flat_hk[None, :])
        inner = np.exp(asr2) * (
            np.exp(-flat_hk[None, :] * (1.0 - rs[:, None]) / (2.0 * (1.0 + rs[:, None]))) / rs[:, None]
            - (1.0 + flat_c[None, :] * xs[:, None] * (1.0 + flat_d[None, :] * xs[:, None]))
        )
        inner = np.where(asr2 > -100, inner, 0.0)
        bvn = bvn + (ah * (_GL_W @ inner)).reshape(h.shape)
    bvn = -bvn / _TWO_PI
    if r > 0:
        return bvn + special.ndtr(-np.maximum(h, k))
    bvn = -bvn
    extra = np.where(
        k > h,
        np.where(h < 0, special.ndtr(k) - special.ndtr(h), special.ndtr(-h) - special.ndtr(-k)),
        0.0,
    )
    return bvn + extra


def _check_r(r: float) -> float:
    r = float(r)
    if not -1.0 < r < 1.0:
        raise ValidationError(f"correlation must lie in (-1, 1), got {r}")
    return r


def bvn_cdf(x1, x2, r: float):
    """P(X1 <= x1, X2 <= x2) for a standard bivariate normal with correlation r."""
    r = _check_r(r)
    x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
    out = np.zeros(x1.shape)
    inf1, inf2 = np.isposinf(x1), np.isposinf(x2)
    neg = np.isneginf(x1) | np.isneginf(x2)
    out = np.where(inf1 & inf2, 1.0, out)
    out = np.where(inf1 & ~inf2, special.ndtr(np.where(inf2, 0.0, x2)), out)
    out = np.where(inf2 & ~inf1, special.ndtr(np.where(inf1, 0.0, x1)), out)
    fin = ~(inf1 | inf2 | neg)
    if np.any(fin):
        vals = _bvnu(-x1[fin], -x2[fin], r)
        out = out.astype(float)
        out[fin] = np.clip(vals, 0.0, 1.0)
    out = np.where(neg, 0.0, out)
    return out if out.ndim else float(out)


def copula_H_r(s, t, r: float):
    """Gaussian copula H_r(s, t) = P(Phi(X1) <= s, Phi(X2) <= t)."""
    r = _check_r(r)
    s, t = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(t, dtype=float))
    if np.any((s < 0) | (s > 1) | (t < 0) | (t > 1)):
        raise ValidationError("copula arguments must lie in [0, 1]")
    if r == 0.0:
        out = s * t
        return out if out.ndim else float(out)
    with np.errstate(divide="ignore"):
        out = bvn_cdf(special.ndtri(s), special.ndtri(t), r)
    return out


# ---------------------------------------------------------------------------
# 2-D law L_r


class _CopulaTable:
    """Bilinear interpolation of H_r on a uniform (grid x grid) lattice of [0, 1]^2.

    Works in float32: the interpolation error (~1e-7 in H) dominates the
    rounding anyway, and halving memory traffic roughly halves the cost.
    """

    def __init__(self, r: float, grid: int):
        self.r = r
        self.grid = grid
        if r != 0.0:
            u = np.linspace(0.0, 1.0, grid)
            self.table_t = np.ascontiguousarray(copula_H_r(u[:, None], u[None, :], r).T).astype(np.float32)

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        """H on the product grid s x t."""
        return self.rows(s, self.columns(t))

    def columns(self, t: np.ndarray):
        """Interpolate every table row at the points t (done once per sample)."""
        if self.r == 0.0:
            return np.asarray(t, dtype=np.float32)
        g = self.grid - 1
        ft = np.clip(t * g, 0, g)
        j0 = np.minimum(ft.astype(int), g - 1)
        wt = (ft - j0).astype(np.float32)[:, None]
        lo = self.table_t[j0]
        cols = np.ascontiguousarray((lo + wt * (self.table_t[j0 + 1] - lo)).T)
        return cols, np.diff(cols, axis=0)

    def rows(self, s: np.ndarray, cols) -> np.ndarray:
        if self.r == 0.0:
            return np.multiply.outer(np.asarray(s, dtype=np.float32), cols)
        base, step = cols
        g = self.grid - 1
        fs = np.clip(s * g, 0, g)
        i0 = np.minimum(fs.astype(int), g - 1)
        ws = (fs - i0).astype(np.float32)[:, None]
        return base[i0] + ws * step[i0]


def field_sup(u: np.ndarray, v: np.ndarray, n: float, table: _CopulaTable, chunk: int = 1024) -> float:
    """sup_{s,t} |#{U <= s, V <= t} - n H(s, t)| / sqrt(n), exact over cell corners.

    On a cell between consecutive sorted coordinates the count is constant and
    H is increasing, so the positive excursion peaks at the lower-left corner
    and the negative one at the upper-right limit.
    """
    m = u.size
    su = np.concatenate(([0.0], np.sort(u), [1.0]))
    sv = np.concatenate(([0.0], np.sort(v), [1.0]))
    if m == 0:
        return float(np.max(n * table(su, sv))) / np.sqrt(n)
    ru = np.empty(m, dtype=np.int64)
    ru[np.argsort(u, kind="stable")] = np.arange(m)
    rv = np.empty(m, dtype=np.int64)
    rv[np.argsort(v, kind="stable")] = np.arange(m)
    # column position of each row's point, rows sorted by u
    col_of_row = np.empty(m, dtype=np.int64)
    col_of_row[ru] = rv
    dtype = np.int16 if m < 32000 else np.int32
    best = 0.0
    cols = table.columns(sv)
    running = np.zeros(m + 1, dtype=dtype)
    for start in range(0, m + 1, chunk):
        stop = min(m + 1, start + chunk)
        # C[i, j] = #points with u-rank < i and v-rank < j, for i in [start, stop)
        rows = np.zeros((stop - start, m + 1), dtype=dtype)
        acc = running.copy()
        for i in range(start, stop):
            rows[i - start] = acc
            if i < m:
                acc[col_of_row[i] + 1 :] += 1
        running = acc
        counts = rows.astype(np.float32)
        h = np.float32(n) * table.rows(su[start : stop + 1], cols)
        best = max(best, float(np.max(counts - h[:-1, :-1])), float(np.max(h[1:, 1:] - counts)))
    return best / np.sqrt(n)


def _lr_chunk(args):
    r, n, seed, reps, grid = args
    table = _CopulaTable(r, grid)
    s = np.sqrt(1.0 - r * r)
    out = np.empty(len(reps))
    for j, i in enumerate(reps):
        rng = rep_rng(seed, i)
        count = rng.poisson(n)
        z = rng.standard_normal((count, 2))
        x1 = z[:, 0]
        x2 = r * z[:, 0] + s * z[:, 1]
        out[j] = field_sup(special.ndtr(x1), special.ndtr(x2), n, table)
    return out


def _cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "adfgof"))


def _cache_path(params: dict) -> Path:
    key = ",".join(f"{k}={params[k]}" for k in sorted(params))
    digest = hashlib.sha256(key.encode()).hexdigest()[:16]
    return _cache_dir() / f"sup_field_2d_{digest}.csv"


def _read_cache(path: Path, params: dict):
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError:
        return None
    header = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split(";") if "=" in item)
    if any(header.get(k) != str(v) for k, v in params.items()):
        return None
    x = np.array([float(line.split(",")[0]) for line in lines[2:]])
    return x


def _write_cache(path: Path, params: dict, x: np.ndarray) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        head = "# " + ";".join(f"{k}={params[k]}" for k in sorted(params))
        heights = np.arange(1, x.size + 1) / x.size
        body = "\n".join(f"{a!r},{b!r}" for a, b in zip(x.tolist(), heights.tolist()))
        tmp = path.with_suffix(".tmp")
        tmp.write_text(f"{head}\nx,cdf\n{body}\n", encoding="utf-8")
        tmp.replace(path)
    except OSError:
        pass


def simulate_field_sups(r: float, n_intensity: int, m_reps: int, seed: int, grid: int = 1025, workers: int = 1):
    """Per-replication sup statistics, replication i seeded by derive_seed(seed, i)."""
    r = _check_r(r)
    reps = np.arange(m_reps)
    if workers <= 1:
        return _lr_chunk((r, n_intensity, seed, reps, grid))
    parts = np.array_split(reps, workers * 4)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(_lr_chunk, [(r, n_intensity, seed, p, grid) for p in parts]))
    return np.concatenate(chunks)


def l_r_cdf(
    r: float,
    n_intensity: int = 2000,
    m_reps: int = 5000,
    grid: int = 1025,
    seed: int = 20240601,
    workers: int = 1,
    use_cache: bool = True,
) -> LimitLaw:
    """Simulated law of the sup of the compensated Poisson field under H_r."""
    r = _check_r(r)
    if n_intensity < 1 or m_reps < 1 or grid < 2:
        raise ValidationError("n_intensity, m_reps and grid must be positive")
    params = {
        "kind": "sup_field_2d",
        "r": repr(float(r)),
        "n_intensity": int(n_intensity),
        "m_reps": int(m_reps),
        "grid": int(grid),
        "seed": int(seed),
        "version": CACHE_VERSION,
    }
    path = _cache_path(params)
    x = _read_cache(path, params) if use_cache else None
    if x is None:
        x = np.sort(simulate_field_sups(r, n_intensity, m_reps, seed, grid, workers))
        if use_cache:
            _write_cache(path, params, x)
    heights = np.arange(1, x.size + 1) / x.size
    return LimitLaw("sup_field_2d", x, heights, "simulation", params)
