"""Interior penalty method for the plate bilinear form on C0 elements.

The discrete form on continuous P_k elements penalizes jumps of the
normal derivative across edges,

    A_h(u, v) = sum_T int grad^2 u : grad^2 v
              - sum_E int ([dn u] {(grad^2 v)_nn} + {(grad^2 u)_nn} [dn v])
              + sum_E (alpha / h_E) int [dn u] [dn v],

with [dn v] the sum of outward normal derivatives of the two neighbors
(one-sided on the boundary) and {.} the arithmetic average.  Under mixed
conditions the edge sums run over interior and clamped edges only; the
value constraint u = 0 on clamped and simply supported edges is
eliminated from the linear system.
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import CLAMPED
from .quadrature import edge_rule, map_edge, map_triangle, triangle_rule
from .spaces import _HESS_METRIC, LagrangeSpace, ScalarField


class SolverError(RuntimeError):
    """Linear solver failed to reach the required residual."""


class IPDGProblem:
    """Plate bending problem data for the penalized C0 discretization.

    The penalty defaults to (k+1)^2; pass alpha0 to scale it, or alpha
    to set the absolute value.  Boundary conditions are read from the
    mesh edge tags (pass boundary to retag a copy of the mesh first).
    """

    def __init__(self, mesh, k, f, alpha=None, alpha0=None, boundary=None,
                 load_quad_degree=None):
        if boundary is not None:
            mesh = mesh.retagged(boundary)
        if alpha is None:
            alpha = (1.0 if alpha0 is None else alpha0) * (k + 1) ** 2
        elif alpha0 is not None:
            raise ValueError("pass either alpha or alpha0, not both")
        if alpha <= 0:
            raise ValueError("penalty must be positive")
        self.mesh = mesh
        self.k = k
        self.alpha = float(alpha)
        self.f = f
        self.space = LagrangeSpace(mesh, k)
        self.load_quad_degree = load_quad_degree if load_quad_degree else 2 * k + 8


@dataclass
class DGNormParts:
    """Squared pieces of the mesh-dependent energy norm."""

    hessian_sq: float
    jump_sq: float

    @property
    def total(self):
        return float(np.sqrt(self.hessian_sq + self.jump_sq))


def penalty_edge_ids(mesh):
    """Edges carrying consistency and penalty terms: interior and clamped."""
    return mesh.edges_with_tag(("", CLAMPED))


def _edge_sides(mesh, eids):
    """Adjacent elements with their outward-normal signs for given edges.

    The batch must be uniformly sided; mixing interior and boundary
    edges would silently drop second neighbors, so it raises instead.
    """
    t1 = mesh.edge_tris[eids, 0]
    t2 = mesh.edge_tris[eids, 1]
    has2 = t2 >= 0
    if has2.any() and not has2.all():
        raise ValueError("edge batch mixes interior and boundary edges")
    slot1 = (mesh.tri_edges[t1] == eids[:, None]).argmax(axis=1)
    s1 = mesh.tri_edge_sign[t1, slot1].astype(float)
    out = [(t1, s1)]
    if len(eids) and has2.all():
        slot2 = (mesh.tri_edges[t2] == eids[:, None]).argmax(axis=1)
        s2 = mesh.tri_edge_sign[t2, slot2].astype(float)
        out.append((t2, s2))
    return out


def _hess_nn(H, n):
    """Contract Hessian components (xx, xy, yy) with a unit normal twice.

    H has shape (ne, ..., 3) with one normal per leading entry.
    """
    shape = (len(n),) + (1,) * (H.ndim - 2)
    n1 = n[:, 0].reshape(shape)
    n2 = n[:, 1].reshape(shape)
    return H[..., 0] * n1 ** 2 + 2.0 * H[..., 1] * n1 * n2 + H[..., 2] * n2 ** 2


def _edge_basis_blocks(space, eids, rule):
    """Jump and average operators of the local basis on a batch of edges.

    All edges in the batch must have the same sidedness.  Returns
    (jump, mean_nn, cols, pts, wts) where jump and mean_nn have shape
    (ne, q, ncols) over the stacked local dofs listed in cols.
    """
    mesh = space.mesh
    pts, wts = map_edge(rule, mesh.vertices[mesh.edges[eids]])
    n = mesh.edge_normal[eids]
    sides = _edge_sides(mesh, eids)
    jumps, means, cols = [], [], []
    for tids, sign in sides:
        G = space.basis_values(tids, pts, 1)
        H = space.basis_values(tids, pts, 2)
        nd = np.einsum("nqlc,nc->nql", G, n) * sign[:, None, None]
        jumps.append(nd)
        means.append(_hess_nn(H, n))
        cols.append(space.cell_dofs[tids])
    jump = np.concatenate(jumps, axis=2)
    mean = np.concatenate(means, axis=2) / len(sides)
    return jump, mean, np.concatenate(cols, axis=1), pts, wts


def assemble(problem, include_consistency=True):
    """Assemble the full (unconstrained) stiffness matrix and load vector.

    With include_consistency=False the symmetrized Hessian cross terms
    are dropped, leaving the Gram matrix of the mesh-dependent norm
    (broken Hessian plus penalty); dg_norm(v)^2 == v' G v.
    """
    space = problem.space
    mesh = space.mesh
    k = problem.k
    nT = mesh.n_triangles
    tids = np.arange(nT)

    rule = triangle_rule(2 * k)
    pts, wts = map_triangle(rule, mesh.tri_verts)
    H = space.basis_values(tids, pts, 2)
    K = np.einsum("nqic,c,nqjc,nq->nij", H, _HESS_METRIC, H, wts)
    rows = np.repeat(space.cell_dofs, space.n_loc, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, space.n_loc)).ravel()
    data = [K.ravel()]
    row_ix = [rows]
    col_ix = [cols]

    erule = edge_rule(2 * k)
    all_pen = penalty_edge_ids(mesh)
    interior = all_pen[mesh.edge_tris[all_pen, 1] >= 0]
    boundary = all_pen[mesh.edge_tris[all_pen, 1] < 0]
    for eids in (interior, boundary):
        if not len(eids):
            continue
        J, M, ecols, _, ewts = _edge_basis_blocks(space, eids, erule)
        ratio = (problem.alpha / mesh.edge_len[eids])[:, None]
        pen = np.einsum("nqi,nqj,nq->nij", J, J, ewts)
        loc = ratio[..., None] * pen
        if include_consistency:
            cross = np.einsum("nqi,nqj,nq->nij", J, M, ewts)
            loc = loc - (cross + cross.transpose(0, 2, 1))
        nc = ecols.shape[1]
        row_ix.append(np.repeat(ecols, nc, axis=1).ravel())
        col_ix.append(np.tile(ecols, (1, nc)).ravel())
        data.append(loc.ravel())

    A = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(row_ix), np.concatenate(col_ix))),
        shape=(space.ndof, space.ndof)).tocsr()

    b = assemble_load(space, problem.f, problem.load_quad_degree)
    return A, b


def assemble_load(space, f, quad_degree):
    """Vector of (f, phi_i) over all dofs of the space."""
    mesh = space.mesh
    rule = triangle_rule(quad_degree)
    pts, wts = map_triangle(rule, mesh.tri_verts)
    B = space.basis_values(np.arange(mesh.n_triangles), pts, 0)
    loc = np.einsum("nqi,nq,nq->ni", B, f(pts), wts)
    b = np.zeros(space.ndof)
    np.add.at(b, space.cell_dofs.ravel(), loc.ravel())
    return b


def residual_tolerance(A, x, b):
    """Absolute residual bound: 1e-10 * ||b||, saturated at rounding noise.

    For fourth order problems the condition number grows like h^-4, so
    on fine meshes even the best representable solution has a residual
    near eps * || |A||x| + |b| ||; a fixed relative tolerance would
    reject exact arithmetic.  The returned bound is the larger of the
    two, which iterative refinement meets at every mesh size while still
    catching genuinely wrong solves by orders of magnitude.
    """
    noise = np.finfo(float).eps * np.linalg.norm(abs(A) @ np.abs(x) + np.abs(b))
    return max(1e-10 * np.linalg.norm(b), noise)


def solve(problem):
    """Solve the penalized problem; returns the deflection field.

    Constrained dofs (u = 0 on clamped and simply supported edges) are
    eliminated and returned as zeros.  Iterative refinement keeps the
    residual at the tolerance of residual_tolerance.
    """
    A, b = assemble(problem)
    space = problem.space
    free = space.free_dofs()
    Aff = A[free][:, free].tocsc()
    bf = b[free]
    coeffs = np.zeros(space.ndof)
    norm_b = np.linalg.norm(bf)
    if norm_b == 0.0:
        return ScalarField(space, coeffs)
    try:
        lu = splu(Aff)
        x = lu.solve(bf)
        resid = np.linalg.norm(Aff @ x - bf)
        for _ in range(3):
            if resid <= 1e-11 * norm_b:
                break
            x = x + lu.solve(bf - Aff @ x)
            resid = np.linalg.norm(Aff @ x - bf)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc
    tol = residual_tolerance(Aff, x, bf)
    if not np.isfinite(resid) or resid > tol:
        raise SolverError(
            f"linear solve residual {resid / norm_b:.3e} relative exceeds "
            f"{tol / norm_b:.3e}")
    coeffs[free] = x
    return ScalarField(space, coeffs)


def _split_by_sidedness(mesh, eids):
    """Index arrays (into the batch) of the interior and boundary edges."""
    interior = mesh.edge_tris[eids, 1] >= 0
    return np.nonzero(interior)[0], np.nonzero(~interior)[0]


def normal_jump_values(u, eids, rule):
    """[dn u] at edge quadrature points: sum of outward normal derivatives.

    Accepts mixed batches; interior edges see both neighbors, boundary
    edges the single one.
    """
    mesh = u.space.mesh
    eids = np.asarray(eids)
    out = np.empty((len(eids), len(rule.points)))
    for sel in _split_by_sidedness(mesh, eids):
        if not len(sel):
            continue
        sub = eids[sel]
        pts, _ = map_edge(rule, mesh.vertices[mesh.edges[sub]])
        n = mesh.edge_normal[sub]
        acc = 0.0
        for tids, sign in _edge_sides(mesh, sub):
            g = u.gradients(tids, pts)
            acc = acc + np.einsum("nqc,nc->nq", g, n) * sign[:, None]
        out[sel] = acc
    return out


def mean_hessian_nn_values(u, eids, rule):
    """{(grad^2 u)_nn} at edge quadrature points (one-sided on boundary)."""
    mesh = u.space.mesh
    eids = np.asarray(eids)
    out = np.empty((len(eids), len(rule.points)))
    for sel in _split_by_sidedness(mesh, eids):
        if not len(sel):
            continue
        sub = eids[sel]
        pts, _ = map_edge(rule, mesh.vertices[mesh.edges[sub]])
        n = mesh.edge_normal[sub]
        sides = _edge_sides(mesh, sub)
        acc = 0.0
        for tids, _ in sides:
            acc = acc + _hess_nn(u.hessians(tids, pts), n)
        out[sel] = acc / len(sides)
    return out


def dg_norm(v, alpha, exact_hessian=None, quad_degree=None):
    """Mesh-dependent norm of a field, or of the error against an exact Hessian.

    With exact_hessian (a callable mapping points to components
    (xx, xy, yy)) the broken part measures grad^2(u - v) while the jump
    part uses [dn v] alone, since the exact solution has no jumps across
    the edge set (interior plus clamped edges).
    """
    space = v.space
    mesh = space.mesh
    k = space.k
    qd = quad_degree if quad_degree else (2 * k if exact_hessian is None else 2 * k + 4)
    rule = triangle_rule(qd)
    tids = np.arange(mesh.n_triangles)
    pts, wts = map_triangle(rule, mesh.tri_verts)
    Hv = v.hessians(tids, pts)
    if exact_hessian is not None:
        Hv = exact_hessian(pts) - Hv
    hess_sq = float(np.einsum("nqc,c,nqc,nq->", Hv, _HESS_METRIC, Hv, wts))

    eids = penalty_edge_ids(mesh)
    jump_sq = 0.0
    if len(eids):
        erule = edge_rule(2 * k)
        J = normal_jump_values(v, eids, erule)
        _, ewts = map_edge(erule, mesh.vertices[mesh.edges[eids]])
        per_edge = np.einsum("nq,nq->n", J ** 2, ewts)
        jump_sq = float(np.sum(alpha / mesh.edge_len[eids] * per_edge))
    return DGNormParts(hess_sq, jump_sq)


def jump_indicator_per_edge(v, alpha):
    """(alpha / h_E) * ||[dn v]||^2 per penalty edge; returns (eids, values)."""
    mesh = v.space.mesh
    eids = penalty_edge_ids(mesh)
    if not len(eids):
        return eids, np.zeros(0)
    erule = edge_rule(2 * v.space.k)
    J = normal_jump_values(v, eids, erule)
    _, ewts = map_edge(erule, mesh.vertices[mesh.edges[eids]])
    vals = alpha / mesh.edge_len[eids] * np.einsum("nq,nq->n", J ** 2, ewts)
    return eids, vals
