"""Quadrature rules on the reference triangle and the unit interval.

Triangle rules come from the Duffy substitution x = s*(1 - t), y = t, which
turns the triangle into a square with Jacobian (1 - t).  A Gauss-Legendre
rule in s tensored with a Gauss-Jacobi rule (weight 1 - t) in t then
integrates any bivariate polynomial of the requested total degree exactly,
with all weights positive.  The rules are not minimal in point count, but
they are available at every degree and are reproducible to the bit.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 50


@dataclass(frozen=True)
class QuadRule:
    """Reference-domain quadrature rule.

    points has shape (n, 2) for triangle rules (coordinates in the unit
    triangle x, y >= 0, x + y <= 1) and (n,) for edge rules (coordinates
    in [0, 1]).  Weights sum to the reference measure: 1/2 resp. 1.
    """

    degree: int
    points: np.ndarray
    weights: np.ndarray


def _check_degree(degree):
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"quadrature degree must be in [0, {MAX_DEGREE}], got {degree}")


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Rule exact for all polynomials of total degree <= degree."""
    _check_degree(degree)
    n = degree // 2 + 1
    xg, wg = roots_legendre(n)
    s = 0.5 * (xg + 1.0)
    ws = 0.5 * wg
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    t = 0.5 * (xj + 1.0)
    wt = 0.25 * wj
    S, T = np.meshgrid(s, t, indexing="ij")
    pts = np.stack([(S * (1.0 - T)).ravel(), T.ravel()], axis=1)
    wts = np.outer(ws, wt).ravel()
    pts.flags.writeable = False
    wts.flags.writeable = False
    return QuadRule(degree, pts, wts)


@lru_cache(maxsize=None)
def edge_rule(degree):
    """Gauss-Legendre rule on [0, 1], exact through the given degree."""
    _check_degree(degree)
    n = degree // 2 + 1
    xg, wg = roots_legendre(n)
    pts = 0.5 * (xg + 1.0)
    wts = 0.5 * wg
    pts.flags.writeable = False
    wts.flags.writeable = False
    return QuadRule(degree, pts, wts)


def map_triangle(rule, verts):
    """Push a reference rule onto physical triangles.

    Parameters
    ----------
    rule : QuadRule
    verts : array, shape (..., 3, 2)

    Returns
    -------
    points : array, shape (..., n, 2)
    weights : array, shape (..., n)
        Physical weights; they sum to the (positive) triangle area.
    """
    verts = np.asarray(verts, dtype=float)
    v0 = verts[..., 0, :]
    e1 = verts[..., 1, :] - v0
    e2 = verts[..., 2, :] - v0
    ref = rule.points
    pts = (v0[..., None, :]
           + ref[:, 0, None] * e1[..., None, :]
           + ref[:, 1, None] * e2[..., None, :])
    det = e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0]
    wts = np.abs(det)[..., None] * rule.weights
    return pts, wts


def map_edge(rule, verts):
    """Push an interval rule onto physical segments.

    verts has shape (..., 2, 2); the rule parameter runs from the first
    endpoint to the second.  Weights sum to the segment length.
    """
    verts = np.asarray(verts, dtype=float)
    a = verts[..., 0, :]
    d = verts[..., 1, :] - a
    pts = a[..., None, :] + rule.points[:, None] * d[..., None, :]
    wts = np.linalg.norm(d, axis=-1)[..., None] * rule.weights
    return pts, wts
