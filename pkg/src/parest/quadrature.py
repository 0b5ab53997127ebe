"""Gauss quadrature on reference simplices.

Rules are exact for polynomial integrands up to a requested total degree,
so that all assembly and estimator integrals of piecewise polynomials are
computed to round-off.  One fixed rule per (dimension, degree) pair is
cached and reused, which keeps repeated assembly bitwise deterministic.
"""

import functools

import numpy as np


@functools.lru_cache(maxsize=None)
def gauss_interval(degree):
    """Points and weights on [0, 1], exact for polynomials of `degree`."""
    npts = degree // 2 + 1
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


@functools.lru_cache(maxsize=None)
def gauss_triangle(degree):
    """Points (n, 2) and weights on the unit triangle {x+y<=1, x,y>=0}.

    Built by collapsing a tensor Gauss rule through the Duffy map
    (u, v) -> (u, v(1-u)).  The Jacobian 1-u raises the effective
    u-degree by one, hence the extra point in that direction.
    """
    nu = (degree + 1) // 2 + 1
    nv = degree // 2 + 1
    xu, wu = np.polynomial.legendre.leggauss(nu)
    xv, wv = np.polynomial.legendre.leggauss(nv)
    xu = 0.5 * (xu + 1.0)
    xv = 0.5 * (xv + 1.0)
    wu = 0.5 * wu
    wv = 0.5 * wv
    pts = []
    wts = []
    for i in range(nu):
        for j in range(nv):
            u = xu[i]
            v = xv[j] * (1.0 - u)
            pts.append((u, v))
            wts.append(wu[i] * wv[j] * (1.0 - u))
    return np.array(pts), np.array(wts)


def simplex_rule(dim, degree):
    """Quadrature on the reference simplex of dimension 1 or 2.

    Returns points with shape (n, dim) and weights summing to the
    reference volume (1 for the interval, 1/2 for the triangle).
    """
    if dim == 1:
        x, w = gauss_interval(degree)
        return x.reshape(-1, 1), w
    if dim == 2:
        return gauss_triangle(degree)
    raise ValueError(f"unsupported dimension {dim}")
