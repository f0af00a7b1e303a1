"""C1 macro elements and conforming companions of discontinuous data.

Each triangle is split at its barycenter into three cubic subtriangles.
Gluing the three cubics with C1 continuity across the internal edges
leaves a 12-dimensional element whose degrees of freedom are vertex
values, vertex gradients and the midpoint normal derivative of each
outer edge ("ct").  Constraining the outer normal derivative to be
linear removes the midpoint unknowns and gives the 9-dof reduced
element ("rhct").  Adjacent elements share vertex data (and, for "ct",
the midpoint normal derivative taken along the global edge normal), so
the assembled space is C1 on the whole mesh.

The element matrices are built numerically: a batched SVD extracts the
C1-compatible subspace of the 3 x 10 raw cubic coefficients, then the
degree-of-freedom matrix is inverted on that subspace.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from ._poly import eval_monomials, monomial_exponents, n_monomials
from .mesh import CLAMPED, SIMPLY_SUPPORTED
from .quadrature import map_triangle, triangle_rule
from .spaces import _MonomialCalculus, _scaled_points

_VALUE_PARAMS = np.array([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0])
_DERIV_PARAMS = np.array([0.0, 0.5, 1.0])


class C1Space:
    """Piecewise cubic C1 space on the barycentric split of each triangle.

    variant is "rhct" (9 local dofs) or "ct" (12 local dofs).  Global
    dof order: vertex values, then vertex gradient pairs (x then y
    component), then for "ct" one normal-derivative moment per edge.
    """

    def __init__(self, mesh, variant="rhct"):
        if variant not in ("rhct", "ct"):
            raise ValueError(f"unknown macro element variant {variant!r}")
        self.mesh = mesh
        self.variant = variant
        self.calc = _MonomialCalculus(3)
        self.n_loc = 12 if variant == "ct" else 9
        nV, nE, nT = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        self.grad_offset = nV
        self.edge_offset = 3 * nV
        self.ndof = 3 * nV + (nE if variant == "ct" else 0)
        self._build_cell_dofs()
        self._build_element_bases()

    def _build_cell_dofs(self):
        mesh = self.mesh
        tris = mesh.triangles
        cols = [tris,
                (self.grad_offset + 2 * tris[:, :, None]
                 + np.arange(2)).reshape(-1, 6)]
        if self.variant == "ct":
            cols.append(self.edge_offset + mesh.tri_edges)
        self.cell_dofs = np.concatenate(cols, axis=1)

    def _build_element_bases(self):
        mesh = self.mesh
        nT = mesh.n_triangles
        verts = mesh.tri_verts          # (nT, 3, 2)
        B = mesh.centroid
        h = mesh.diam
        exps = self.calc.exps
        Dx, Dy = self.calc.D1

        self.sub_verts = np.empty((nT, 3, 3, 2))
        for s in range(3):
            self.sub_verts[:, s, 0] = verts[:, s]
            self.sub_verts[:, s, 1] = verts[:, (s + 1) % 3]
            self.sub_verts[:, s, 2] = B

        def mono_at(pts):
            return eval_monomials(_scaled_points(B, h, pts), exps)

        def grad_at(pts):
            V = eval_monomials(_scaled_points(B, h, pts), exps)
            return np.stack([V @ Dx, V @ Dy], axis=-1)  # scaled gradient

        rows = []

        def add_rows(block_plus, block_minus, vals):
            # vals: (nT, npts, 10) -> one constraint row per sample point
            npts = vals.shape[1]
            R = np.zeros((nT, npts, 30))
            R[:, :, 10 * block_plus:10 * (block_plus + 1)] = vals
            if block_minus is not None:
                R[:, :, 10 * block_minus:10 * (block_minus + 1)] -= vals
            rows.append(R)

        for i in range(3):
            vi = verts[:, i]
            seg = B - vi
            pts_v = vi[:, None, :] + _VALUE_PARAMS[None, :, None] * seg[:, None, :]
            pts_d = vi[:, None, :] + _DERIV_PARAMS[None, :, None] * seg[:, None, :]
            nrm = np.stack([seg[:, 1], -seg[:, 0]], axis=1)
            nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
            prev = (i + 2) % 3
            add_rows(prev, i, mono_at(pts_v))
            gd = np.einsum("nqmc,nc->nqm", grad_at(pts_d), nrm)
            R = np.zeros((nT, len(_DERIV_PARAMS), 30))
            R[:, :, 10 * prev:10 * (prev + 1)] = gd
            R[:, :, 10 * i:10 * (i + 1)] -= gd
            rows.append(R)

        if self.variant == "rhct":
            for i in range(3):
                a, b = verts[:, i], verts[:, (i + 1) % 3]
                mid = 0.5 * (a + b)
                nrm = mesh.edge_normal[mesh.tri_edges[:, i]]
                pts = np.stack([a, b, mid], axis=1)
                gd = np.einsum("nqmc,nc->nqm", grad_at(pts), nrm)
                row = gd[:, 2] - 0.5 * gd[:, 0] - 0.5 * gd[:, 1]
                R = np.zeros((nT, 1, 30))
                R[:, 0, 10 * i:10 * (i + 1)] = row
                rows.append(R)

        C = np.concatenate(rows, axis=1)
        nullity = self.n_loc
        rank = 30 - nullity
        U, S, Vh = np.linalg.svd(C)
        gap_ok = (S[:, rank - 1] > 1e-7 * S[:, 0]) & (
            S[:, rank:].max(axis=1) < 1e-9 * S[:, 0])
        if not np.all(gap_ok):
            bad = np.nonzero(~gap_ok)[0][:5]
            raise RuntimeError(f"macro element constraint rank defect on {bad}")
        N = Vh[:, rank:, :]             # (nT, nullity, 30)

        # degree-of-freedom functionals on the raw 30 coefficients
        D = np.zeros((nT, self.n_loc, 30))
        for i in range(3):
            vi = verts[:, i][:, None, :]
            D[:, i, 10 * i:10 * (i + 1)] = mono_at(vi)[:, 0]
            g = grad_at(vi)[:, 0] / h[:, None, None]
            D[:, 3 + 2 * i, 10 * i:10 * (i + 1)] = g[..., 0]
            D[:, 4 + 2 * i, 10 * i:10 * (i + 1)] = g[..., 1]
        if self.variant == "ct":
            for i in range(3):
                mid = 0.5 * (verts[:, i] + verts[:, (i + 1) % 3])
                nrm = mesh.edge_normal[mesh.tri_edges[:, i]]
                g = grad_at(mid[:, None, :])[:, 0] / h[:, None, None]
                D[:, 9 + i, 10 * i:10 * (i + 1)] = np.einsum(
                    "nmc,nc->nm", g, nrm)

        DN = np.einsum("nlr,ndr->nld", D, N)
        G = np.linalg.inv(DN)
        coeffs = np.einsum("ndr,ndl->nrl", N, G)   # (nT, 30, n_loc)
        self.sub_coeffs = coeffs.reshape(nT, 3, 10, self.n_loc)
        self._centers, self._scales = B, h

    # -- evaluation ----------------------------------------------------

    def basis_values_sub(self, tids, sub, pts, order=0):
        """Basis (derivatives) on subtriangle `sub` of each element.

        sub is a scalar slot (0, 1, 2) or an array of slots per element.
        Shapes follow LagrangeSpace.basis_values.
        """
        tids = np.asarray(tids)
        if np.isscalar(sub):
            C = self.sub_coeffs[tids, sub]
        else:
            C = self.sub_coeffs[tids, np.asarray(sub)]
        h = self._scales[tids]
        xi = _scaled_points(self._centers[tids], h, pts)
        V = eval_monomials(xi, self.calc.exps)
        if order == 0:
            return np.matmul(V, C)
        if order == 1:
            out = np.stack([np.matmul(V, np.matmul(D, C)) for D in self.calc.D1],
                           axis=-1)
            return out / h[:, None, None, None]
        if order == 2:
            out = np.stack([np.matmul(V, np.matmul(D, C)) for D in self.calc.D2],
                           axis=-1)
            return out / (h ** 2)[:, None, None, None]
        raise ValueError(f"unsupported derivative order {order}")


class C1Field:
    """Coefficient vector over a C1Space."""

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (space.ndof,):
            raise ValueError("coefficient vector has wrong length")

    def _local(self, tids):
        return self.coeffs[self.space.cell_dofs[tids]]

    def values_sub(self, tids, sub, pts):
        B = self.space.basis_values_sub(tids, sub, pts, 0)
        return np.einsum("nql,nl->nq", B, self._local(tids))

    def gradients_sub(self, tids, sub, pts):
        B = self.space.basis_values_sub(tids, sub, pts, 1)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))

    def hessians_sub(self, tids, sub, pts):
        B = self.space.basis_values_sub(tids, sub, pts, 2)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))


def interpolate_c1(space, fn, grad_fn, normal_moment_fn=None):
    """Set C1 dofs from a smooth function and its gradient.

    For the "ct" variant the midpoint normal derivative is taken from
    grad_fn as well unless normal_moment_fn supplies it directly.
    """
    mesh = space.mesh
    dofs = np.empty(space.ndof)
    dofs[: mesh.n_vertices] = fn(mesh.vertices)
    g = grad_fn(mesh.vertices)
    dofs[space.grad_offset:space.grad_offset + 2 * mesh.n_vertices] = g.ravel()
    if space.variant == "ct":
        mids = mesh.edge_mid
        if normal_moment_fn is not None:
            dofs[space.edge_offset:] = normal_moment_fn(mids, mesh.edge_normal)
        else:
            gm = grad_fn(mids)
            dofs[space.edge_offset:] = np.einsum("ec,ec->e", gm, mesh.edge_normal)
    return C1Field(space, dofs)


def _gradient_reduction(mesh, tags_value=(CLAMPED, SIMPLY_SUPPORTED),
                        tags_normal=(CLAMPED,)):
    """Per-vertex admissible gradient directions under the essential BCs.

    Returns (fixed_value_mask, list_of_free_direction_matrices) where the
    per-vertex matrix has shape (2, n_free) with orthonormal columns.
    """
    nV = mesh.n_vertices
    fixed_value = mesh.vertices_on_tags(tags_value)
    dirs = [[] for _ in range(nV)]
    for eid in range(mesh.n_edges):
        tag = mesh.edge_tag[eid]
        if tag == "":
            continue
        a, b = mesh.edges[eid]
        t = mesh.edge_tangent[eid]
        n = mesh.edge_normal[eid]
        if tag in tags_value:
            dirs[a].append(t)
            dirs[b].append(t)
        if tag in tags_normal:
            dirs[a].append(n)
            dirs[b].append(n)
    free = []
    eye = np.eye(2)
    for v in range(nV):
        if not dirs[v]:
            free.append(eye)
            continue
        A = np.array(dirs[v])
        _, S, Vh = np.linalg.svd(A)
        rank = int(np.sum(S > 1e-10 * max(S[0], 1.0)))
        free.append(Vh[rank:].T.copy())
    return fixed_value, free


def constraint_reduction(space):
    """Sparse map from reduced (free) coefficients to full C1 coefficients.

    Encodes u = 0 on clamped and simply supported edges and du/dn = 0 on
    clamped edges: boundary vertex values vanish, vertex gradients are
    restricted to the directions not fixed by adjacent boundary edges,
    and for the "ct" variant the midpoint normal derivatives of clamped
    edges vanish.
    """
    mesh = space.mesh
    nV = mesh.n_vertices
    fixed_value, free_dirs = _gradient_reduction(mesh)
    rows, cols, vals = [], [], []
    col = 0
    for v in range(nV):
        if not fixed_value[v]:
            rows.append(v)
            cols.append(col)
            vals.append(1.0)
            col += 1
    for v in range(nV):
        d = free_dirs[v]
        for j in range(d.shape[1]):
            for c in range(2):
                if d[c, j] != 0.0:
                    rows.append(space.grad_offset + 2 * v + c)
                    cols.append(col)
                    vals.append(d[c, j])
            col += 1
    if space.variant == "ct":
        for e in range(mesh.n_edges):
            if mesh.edge_tag[e] != CLAMPED:
                rows.append(space.edge_offset + e)
                cols.append(col)
                vals.append(1.0)
                col += 1
    R = sparse.coo_matrix((vals, (rows, cols)), shape=(space.ndof, col))
    return R.tocsr()


def c1_mass_matrix(space, quad_degree=6):
    """Sparse mass matrix of the macro element space."""
    mesh = space.mesh
    nT = mesh.n_triangles
    rule = triangle_rule(quad_degree)
    tids = np.arange(nT)
    M_loc = np.zeros((nT, space.n_loc, space.n_loc))
    for s in range(3):
        pts, wts = map_triangle(rule, space.sub_verts[:, s])
        B = space.basis_values_sub(tids, s, pts, 0)
        M_loc += np.einsum("nqi,nqj,nq->nij", B, B, wts)
    rows = np.repeat(space.cell_dofs, space.n_loc, axis=1).ravel()
    cols = np.tile(space.cell_dofs, (1, space.n_loc)).ravel()
    M = sparse.coo_matrix((M_loc.ravel(), (rows, cols)),
                          shape=(space.ndof, space.ndof))
    return M.tocsr()


def project_conforming(u, space, quad_degree=None, return_system=False):
    """Constrained L2 projection of a discrete field onto the C1 space.

    Minimizes the L2 distance to u over macro-element fields satisfying
    the homogeneous essential conditions read off the mesh boundary
    tags.  Returns the C1Field (and optionally the reduced system for
    diagnostics).
    """
    mesh = space.mesh
    if u.space.mesh is not mesh and u.space.mesh.n_triangles != mesh.n_triangles:
        raise ValueError("field and macro space live on different meshes")
    qd = quad_degree if quad_degree is not None else max(6, 2 * u.space.k)
    rule = triangle_rule(qd)
    nT = mesh.n_triangles
    tids = np.arange(nT)
    b_loc = np.zeros((nT, space.n_loc))
    for s in range(3):
        pts, wts = map_triangle(rule, space.sub_verts[:, s])
        B = space.basis_values_sub(tids, s, pts, 0)
        uv = u.values(tids, pts)
        b_loc += np.einsum("nqi,nq,nq->ni", B, uv, wts)
    b = np.zeros(space.ndof)
    np.add.at(b, space.cell_dofs.ravel(), b_loc.ravel())

    M = c1_mass_matrix(space, quad_degree=max(6, qd))
    R = constraint_reduction(space)
    K = (R.T @ M @ R).tocsc()
    rhs = R.T @ b
    y = spsolve(K, rhs)
    coeffs = R @ y
    field = C1Field(space, coeffs)
    if return_system:
        return field, (M, b, R, y)
    return field


# ----------------------------------------------------------------------
# piecewise polynomial L2 projection (no continuity)


class PiecewisePoly:
    """Discontinuous elementwise polynomial in scaled centered monomials."""

    def __init__(self, mesh, degree, coeffs):
        self.mesh = mesh
        self.degree = degree
        self.exps = monomial_exponents(degree)
        self.coeffs = coeffs            # (nT, n_monomials(degree))

    def values(self, tids, pts):
        tids = np.asarray(tids)
        if self.coeffs.shape[1] == 0:
            return np.zeros(pts.shape[:-1])
        xi = _scaled_points(self.mesh.centroid[tids], self.mesh.diam[tids], pts)
        V = eval_monomials(xi, self.exps)
        return np.einsum("nqm,nm->nq", V, self.coeffs[tids])


def l2_project_piecewise(fn, mesh, degree, quad_degree=None):
    """Elementwise L2 projection of a function onto P_degree.

    degree may be negative, in which case the projection is the zero
    function (used by the data oscillation term at the lowest order).
    """
    nm = n_monomials(degree)
    if nm == 0:
        return PiecewisePoly(mesh, degree, np.zeros((mesh.n_triangles, 0)))
    qd = quad_degree if quad_degree is not None else 2 * max(degree, 1) + 8
    rule = triangle_rule(qd)
    pts, wts = map_triangle(rule, mesh.tri_verts)
    exps = monomial_exponents(degree)
    xi = _scaled_points(mesh.centroid, mesh.diam, pts)
    V = eval_monomials(xi, exps)
    G = np.einsum("nqi,nqj,nq->nij", V, V, wts)
    rhs = np.einsum("nqi,nq,nq->ni", V, fn(pts), wts)
    coeffs = np.linalg.solve(G, rhs)
    return PiecewisePoly(mesh, degree, coeffs)
