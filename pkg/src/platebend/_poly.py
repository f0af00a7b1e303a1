"""Monomial and Legendre helpers shared by the element spaces.

Element-local polynomials are stored as coefficient vectors over scaled
monomials ((x - c) / h)^a ((y - c) / h)^b with c the element centroid and
h its diameter, which keeps Vandermonde matrices well conditioned across
refinement levels.
"""

import numpy as np


def monomial_exponents(deg):
    """Exponent pairs (a, b) with a + b <= deg, graded order.

    A negative degree yields an empty list, which encodes the zero space.
    """
    if deg < 0:
        return np.zeros((0, 2), dtype=int)
    exps = [(d - b, b) for d in range(deg + 1) for b in range(d + 1)]
    return np.array(exps, dtype=int)


def n_monomials(deg):
    return 0 if deg < 0 else (deg + 1) * (deg + 2) // 2


def eval_monomials(xi, exps):
    """Evaluate monomials at scaled points.

    Parameters
    ----------
    xi : array, shape (..., 2)
        Points in element-local scaled coordinates.
    exps : array, shape (m, 2)

    Returns
    -------
    array, shape (..., m)
    """
    xi = np.asarray(xi, dtype=float)
    return xi[..., 0:1] ** exps[:, 0] * xi[..., 1:2] ** exps[:, 1]


def diff_matrix(exps, axis):
    """Matrix D with (D @ coeffs) the coefficients of d/dxi_axis.

    Both source and target use the same exponent list, so the top-degree
    row block of the result is zero.
    """
    m = len(exps)
    index = {(int(a), int(b)): i for i, (a, b) in enumerate(exps)}
    D = np.zeros((m, m))
    for i, (a, b) in enumerate(exps):
        e = (int(a), int(b))
        p = e[axis]
        if p > 0:
            tgt = (e[0] - 1, e[1]) if axis == 0 else (e[0], e[1] - 1)
            D[index[tgt], i] = p
    return D


def shifted_legendre(s, nmax):
    """Values of the Legendre polynomials P_0..P_nmax at 2s - 1.

    Returns an array of shape s.shape + (nmax + 1,).  These are the edge
    moment weight functions; orthogonality on [0, 1] gives
    int_0^1 P_i(2s-1) P_j(2s-1) ds = delta_ij / (2i + 1).
    """
    s = np.asarray(s, dtype=float)
    x = 2.0 * s - 1.0
    out = np.empty(s.shape + (nmax + 1,))
    out[..., 0] = 1.0
    if nmax >= 1:
        out[..., 1] = x
    for n in range(1, nmax):
        out[..., n + 1] = ((2 * n + 1) * x * out[..., n] - n * out[..., n - 1]) / (n + 1)
    return out
