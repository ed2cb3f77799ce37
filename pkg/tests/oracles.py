"""Independent high-precision oracles (mpmath) for the Gaussian kernels."""

import mpmath as mp
import numpy as np

mp.mp.dps = 30


def tail_moments(y):
    """M_k(y) = int_y^inf u^k dPhi(u), k = 0..4, in closed form."""
    y = mp.mpf(y)
    s, f = mp.ncdf(-y), mp.npdf(y)
    return [s, f, y * f + s, (y * y + 2) * f, (y**3 + 3 * y) * f + 3 * s]


def gamma2(y):
    m = tail_moments(y)
    return mp.matrix([[m[0], -m[1]], [-m[1], m[2]]])


def gamma3(y):
    m = tail_moments(y)
    # h3 = (1, -u, 1 - u^2)
    a11, a12, a13 = m[0], -m[1], m[0] - m[2]
    a22, a23 = m[2], -m[1] + m[3]
    a33 = m[0] - 2 * m[2] + m[4]
    return mp.matrix([[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]])


def h2(u):
    return mp.matrix([1, -u])


def h3(u):
    return mp.matrix([1, -u, 1 - u * u])


def kernel_vector(z, dim=2, phi=lambda u: 1, lo=-mp.inf):
    """int_{lo}^{z} phi(u) Gamma(u)^{-1} h(u) dPhi(u) by mpmath quadrature."""
    gam, h = (gamma2, h2) if dim == 2 else (gamma3, h3)
    out = []
    for k in range(dim):
        g = lambda u, k=k: phi(u) * (mp.lu_solve(gam(u), h(u))[k]) * mp.npdf(u)
        out.append(float(mp.quad(g, [lo, min(mp.mpf(z), 0) if z > 0 else z, z] if z > 0 else [lo, z])))
    return np.array(out)


def tail_gram_quad(y, dim):
    """Gram matrix by direct numerical integration of h h^T over [y, inf)."""
    h = h2 if dim == 2 else h3
    out = np.zeros((dim, dim))
    for i in range(dim):
        for j in range(dim):
            out[i, j] = float(mp.quad(lambda u: h(u)[i] * h(u)[j] * mp.npdf(u), [y, mp.inf]))
    return out


def sup_bm_cdf(x, terms=60):
    """P(sup_{[0,1]} |W| <= x) from the eigenfunction series."""
    x = mp.mpf(x)
    return 4 / mp.pi * mp.nsum(
        lambda k: (-1) ** int(k) / (2 * k + 1) * mp.exp(-mp.pi**2 * (2 * k + 1) ** 2 / (8 * x * x)), [0, terms]
    )


def bvn_cdf(x1, x2, r):
    """P(X1 <= x1, X2 <= x2) as int phi(u) Phi((x2 - r u) / sqrt(1 - r^2)) du."""
    x1, x2, r = mp.mpf(x1), mp.mpf(x2), mp.mpf(r)
    s = mp.sqrt(1 - r * r)
    return mp.quad(lambda u: mp.npdf(u) * mp.ncdf((x2 - r * u) / s), [-mp.inf, min(x1, 0), x1])
