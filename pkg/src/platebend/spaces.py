"""Finite element spaces on triangle meshes.

Three families live here:

* LagrangeSpace: continuous P_k elements (k >= 2) with vertex values,
  edge moments against Legendre weights and interior moments as degrees
  of freedom.  Shared edge moments are evaluated along the global edge
  direction, which makes the basis continuous without any orientation
  bookkeeping in the assembly loops.
* HHJSpace: symmetric piecewise polynomial moment tensors of degree k-1
  whose normal-normal component is continuous across edges (the mixed
  space of Hellan, Herrmann and Johnson).  Degrees of freedom are edge
  moments of tau_nn and interior tensor moments.
* C1Space: the cubic macro elements of Hsieh, Clough and Tocher on the
  barycentric split of each triangle, either with full cubic normal
  derivatives on outer edges ("ct") or with the reduced variant whose
  outer normal derivative is linear ("rhct").  These provide the
  conforming companion used by the error bound.

All bases are constructed per element as dual bases in scaled centered
monomials; evaluation is vectorized over elements.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from ._poly import (diff_matrix, eval_monomials, monomial_exponents,
                    n_monomials, shifted_legendre)
from .mesh import CLAMPED, FREE, SIMPLY_SUPPORTED
from .quadrature import edge_rule, map_edge, map_triangle, triangle_rule

_HESS_METRIC = np.array([1.0, 2.0, 1.0])  # Frobenius weights for (xx, xy, yy)


class _MonomialCalculus:
    """Derivative matrices for a fixed monomial exponent list."""

    def __init__(self, deg):
        self.exps = monomial_exponents(deg)
        Dx = diff_matrix(self.exps, 0)
        Dy = diff_matrix(self.exps, 1)
        self.D1 = (Dx, Dy)
        self.D2 = (Dx @ Dx, Dx @ Dy, Dy @ Dy)


def _scaled_points(centers, scales, pts):
    """Physical points (n, q, 2) to local coordinates of their elements."""
    return (pts - centers[:, None, :]) / scales[:, None, None]


def _apply_coeffs(V, C):
    # V: (n, q, m) monomial values, C: (n, m, l) coefficients
    return np.matmul(V, C)


# ----------------------------------------------------------------------
# continuous Lagrange elements


class LagrangeSpace:
    """Continuous P_k space, k >= 2.

    Degrees of freedom, in global numbering order: one value per vertex,
    k-1 Legendre moments per edge, dim P_{k-3} interior moments per
    element.  cell_dofs lists them per element as
    [v0, v1, v2, edge0 moments, edge1, edge2, interior].
    """

    def __init__(self, mesh, k):
        if k < 2:
            raise ValueError("polynomial degree must be at least 2")
        self.mesh = mesh
        self.k = k
        self.calc = _MonomialCalculus(k)
        self.n_loc = n_monomials(k)
        self.n_edge_modes = k - 1
        self.int_exps = monomial_exponents(k - 3)
        self.n_int = n_monomials(k - 3)
        nV, nE, nT = mesh.n_vertices, mesh.n_edges, mesh.n_triangles
        self.edge_offset = nV
        self.int_offset = nV + self.n_edge_modes * nE
        self.ndof = self.int_offset + self.n_int * nT
        self._build_cell_dofs()
        self._build_dual_basis()

    def _build_cell_dofs(self):
        mesh, k = self.mesh, self.k
        nT = mesh.n_triangles
        cols = [mesh.triangles]
        em = self.n_edge_modes
        edge_dofs = (self.edge_offset + em * mesh.tri_edges[:, :, None]
                     + np.arange(em)).reshape(nT, 3 * em)
        cols.append(edge_dofs)
        if self.n_int:
            cols.append(self.int_offset + self.n_int * np.arange(nT)[:, None]
                        + np.arange(self.n_int))
        self.cell_dofs = np.concatenate(cols, axis=1)
        assert self.cell_dofs.shape[1] == self.n_loc

    def _build_dual_basis(self):
        mesh, k = self.mesh, self.k
        nT = mesh.n_triangles
        exps = self.calc.exps
        c, h = mesh.centroid, mesh.diam
        F = np.empty((nT, self.n_loc, self.n_loc))

        vx = _scaled_points(c, h, mesh.tri_verts)
        F[:, 0:3, :] = eval_monomials(vx, exps)

        # Moments are taken on the reference domains (unit edge / unit
        # weight triangle rule), which keeps all dual basis functions at
        # unit scale and the stiffness matrix well conditioned under
        # refinement.
        erule = edge_rule(2 * k)
        leg = shifted_legendre(erule.points, k - 2)  # (q, k-1)
        epts, _ = map_edge(erule, mesh.vertices[mesh.edges])  # per global edge
        for slot in range(3):
            eids = mesh.tri_edges[:, slot]
            xi = _scaled_points(c, h, epts[eids])
            V = eval_monomials(xi, exps)  # (nT, q, m)
            rows = np.einsum("tqm,ql,q->tlm", V, leg, erule.weights)
            F[:, 3 + slot * (k - 1):3 + (slot + 1) * (k - 1), :] = rows

        if self.n_int:
            trule = triangle_rule(2 * k)
            tpts, _ = map_triangle(trule, mesh.tri_verts)
            xi = _scaled_points(c, h, tpts)
            V = eval_monomials(xi, exps)
            P = eval_monomials(xi, self.int_exps)
            F[:, 3 + 3 * (k - 1):, :] = np.einsum(
                "tqm,tql,q->tlm", V, P, trule.weights)

        self.coeffs = np.linalg.inv(F)
        self._centers, self._scales = c, h

    # -- evaluation ----------------------------------------------------

    def basis_values(self, tids, pts, order=0):
        """Local basis (derivatives) at physical points.

        pts has shape (len(tids), q, 2).  Returns (n, q, n_loc) for order
        0, (n, q, n_loc, 2) for the gradient and (n, q, n_loc, 3) for the
        Hessian components (xx, xy, yy).
        """
        tids = np.asarray(tids)
        C = self.coeffs[tids]
        h = self._scales[tids]
        xi = _scaled_points(self._centers[tids], h, pts)
        V = eval_monomials(xi, self.calc.exps)
        if order == 0:
            return _apply_coeffs(V, C)
        if order == 1:
            out = np.stack([_apply_coeffs(V, np.matmul(D, C)) for D in self.calc.D1],
                           axis=-1)
            return out / h[:, None, None, None]
        if order == 2:
            out = np.stack([_apply_coeffs(V, np.matmul(D, C)) for D in self.calc.D2],
                           axis=-1)
            return out / (h ** 2)[:, None, None, None]
        raise ValueError(f"unsupported derivative order {order}")

    def constrained_value_dofs(self, tags=(CLAMPED, SIMPLY_SUPPORTED)):
        """Dofs pinned to zero by the essential condition u = 0 on the tags."""
        mesh = self.mesh
        fixed = np.zeros(self.ndof, dtype=bool)
        fixed[: mesh.n_vertices] = mesh.vertices_on_tags(tags)
        em = self.n_edge_modes
        for eid in self.mesh.edges_with_tag(tags):
            fixed[self.edge_offset + em * eid:self.edge_offset + em * (eid + 1)] = True
        return np.nonzero(fixed)[0]

    def free_dofs(self, tags=(CLAMPED, SIMPLY_SUPPORTED)):
        mask = np.ones(self.ndof, dtype=bool)
        mask[self.constrained_value_dofs(tags)] = False
        return np.nonzero(mask)[0]


class ScalarField:
    """Coefficient vector over a LagrangeSpace with pointwise evaluators."""

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (space.ndof,):
            raise ValueError("coefficient vector has wrong length")

    def _local(self, tids):
        return self.coeffs[self.space.cell_dofs[tids]]

    def values(self, tids, pts):
        B = self.space.basis_values(tids, pts, 0)
        return np.einsum("nql,nl->nq", B, self._local(tids))

    def gradients(self, tids, pts):
        B = self.space.basis_values(tids, pts, 1)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))

    def hessians(self, tids, pts):
        """Hessian components (xx, xy, yy) at the points."""
        B = self.space.basis_values(tids, pts, 2)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))


def interpolate(space, fn, quad_degree=None):
    """Interpolate a smooth function by matching all degrees of freedom.

    fn maps an (..., 2) array of points to values.  Moments are computed
    with a fixed-degree quadrature, so for non-polynomial data the result
    is exact only to quadrature accuracy.
    """
    mesh, k = space.mesh, space.k
    qd = quad_degree if quad_degree is not None else 2 * k + 8
    dofs = np.empty(space.ndof)
    dofs[: mesh.n_vertices] = fn(mesh.vertices)

    erule = edge_rule(qd)
    leg = shifted_legendre(erule.points, k - 2)
    epts, _ = map_edge(erule, mesh.vertices[mesh.edges])
    vals = fn(epts)
    moments = np.einsum("eq,ql,q->el", vals, leg, erule.weights)
    dofs[space.edge_offset:space.int_offset] = moments.ravel()

    if space.n_int:
        trule = triangle_rule(qd)
        tpts, _ = map_triangle(trule, mesh.tri_verts)
        xi = _scaled_points(mesh.centroid, mesh.diam, tpts)
        P = eval_monomials(xi, space.int_exps)
        tm = np.einsum("tq,tql,q->tl", fn(tpts), P, trule.weights)
        dofs[space.int_offset:] = tm.ravel()
    return ScalarField(space, dofs)


# ----------------------------------------------------------------------
# Hellan-Herrmann-Johnson moment tensors


class HHJSpace:
    """Symmetric tensor space of degree d with continuous normal-normal trace.

    Degrees of freedom: d+1 Legendre moments of tau_nn per edge, then
    3 * dim P_{d-1} interior moments per element.  Component order in
    all tensor-valued arrays is (xx, xy, yy); the off-diagonal basis
    tensor has both off-diagonal entries equal to one, so the Frobenius
    pairing carries weights (1, 2, 1).
    """

    def __init__(self, mesh, degree):
        if degree < 0:
            raise ValueError("tensor degree must be nonnegative")
        self.mesh = mesh
        self.degree = degree
        self.calc = _MonomialCalculus(degree)
        self.n_mono = n_monomials(degree)
        self.n_loc = 3 * self.n_mono
        self.n_edge_modes = degree + 1
        self.int_exps = monomial_exponents(degree - 1)
        self.n_int_modes = n_monomials(degree - 1)
        self.n_int = 3 * self.n_int_modes
        nE, nT = mesh.n_edges, mesh.n_triangles
        self.int_offset = self.n_edge_modes * nE
        self.ndof = self.int_offset + self.n_int * nT
        self._build_cell_dofs()
        self._build_dual_basis()

    def _build_cell_dofs(self):
        mesh = self.mesh
        nT = mesh.n_triangles
        em = self.n_edge_modes
        edge_dofs = (em * mesh.tri_edges[:, :, None]
                     + np.arange(em)).reshape(nT, 3 * em)
        cols = [edge_dofs]
        if self.n_int:
            cols.append(self.int_offset + self.n_int * np.arange(nT)[:, None]
                        + np.arange(self.n_int))
        self.cell_dofs = np.concatenate(cols, axis=1)
        assert self.cell_dofs.shape[1] == self.n_loc

    def _build_dual_basis(self):
        mesh, d = self.mesh, self.degree
        nT = mesh.n_triangles
        nm = self.n_mono
        c, h = mesh.centroid, mesh.diam
        F = np.zeros((nT, self.n_loc, self.n_loc))

        # Reference-domain moments, matching the scalar space convention.
        erule = edge_rule(2 * d + 2)
        leg = shifted_legendre(erule.points, d)
        epts, _ = map_edge(erule, mesh.vertices[mesh.edges])
        nrm = mesh.edge_normal
        wcomp = np.stack([nrm[:, 0] ** 2, 2 * nrm[:, 0] * nrm[:, 1],
                          nrm[:, 1] ** 2], axis=1)  # (nE, 3)
        em = self.n_edge_modes
        for slot in range(3):
            eids = mesh.tri_edges[:, slot]
            xi = _scaled_points(c, h, epts[eids])
            V = eval_monomials(xi, self.calc.exps)
            base = np.einsum("tqm,ql,q->tlm", V, leg, erule.weights)
            rows = wcomp[eids][:, None, :, None] * base[:, :, None, :]
            F[:, slot * em:(slot + 1) * em, :] = rows.reshape(nT, em, self.n_loc)

        if self.n_int:
            trule = triangle_rule(2 * d)
            tpts, _ = map_triangle(trule, mesh.tri_verts)
            xi = _scaled_points(c, h, tpts)
            V = eval_monomials(xi, self.calc.exps)
            P = eval_monomials(xi, self.int_exps)
            mom = np.einsum("tqm,tql,q->tlm", V, P, trule.weights)
            for comp in range(3):
                rows = slice(3 * em + comp * self.n_int_modes,
                             3 * em + (comp + 1) * self.n_int_modes)
                colblock = slice(comp * nm, (comp + 1) * nm)
                F[:, rows, colblock] = _HESS_METRIC[comp] * mom

        self.coeffs = np.linalg.inv(F)
        self._centers, self._scales = c, h

    # -- evaluation ----------------------------------------------------

    def _component_coeffs(self, tids):
        """Coefficients reshaped to (n, 3, n_mono, n_loc)."""
        C = self.coeffs[tids]
        n = C.shape[0]
        return C.reshape(n, 3, self.n_mono, self.n_loc)

    def basis_tensor(self, tids, pts):
        """(n, q, n_loc, 3) tensor components (xx, xy, yy)."""
        tids = np.asarray(tids)
        Cc = self._component_coeffs(tids)
        xi = _scaled_points(self._centers[tids], self._scales[tids], pts)
        V = eval_monomials(xi, self.calc.exps)
        return np.einsum("nqm,ncml->nqlc", V, Cc)

    def basis_div(self, tids, pts):
        """(n, q, n_loc, 2) row divergence (d_x t_xx + d_y t_xy, ...)."""
        tids = np.asarray(tids)
        Cc = self._component_coeffs(tids)
        h = self._scales[tids]
        Dx, Dy = self.calc.D1
        d1 = np.matmul(Dx, Cc[:, 0]) + np.matmul(Dy, Cc[:, 1])
        d2 = np.matmul(Dx, Cc[:, 1]) + np.matmul(Dy, Cc[:, 2])
        xi = _scaled_points(self._centers[tids], h, pts)
        V = eval_monomials(xi, self.calc.exps)
        out = np.stack([_apply_coeffs(V, d1), _apply_coeffs(V, d2)], axis=-1)
        return out / h[:, None, None, None]

    def basis_divdiv(self, tids, pts):
        """(n, q, n_loc) scalar double divergence."""
        tids = np.asarray(tids)
        Cc = self._component_coeffs(tids)
        h = self._scales[tids]
        Dxx, Dxy, Dyy = self.calc.D2
        dd = (np.matmul(Dxx, Cc[:, 0]) + 2.0 * np.matmul(Dxy, Cc[:, 1])
              + np.matmul(Dyy, Cc[:, 2]))
        xi = _scaled_points(self._centers[tids], h, pts)
        V = eval_monomials(xi, self.calc.exps)
        return _apply_coeffs(V, dd) / (h ** 2)[:, None, None]

    def basis_grad_tensor(self, tids, pts):
        """(n, q, n_loc, 3, 2) componentwise gradients of the tensor."""
        tids = np.asarray(tids)
        Cc = self._component_coeffs(tids)
        h = self._scales[tids]
        xi = _scaled_points(self._centers[tids], h, pts)
        V = eval_monomials(xi, self.calc.exps)
        parts = []
        for D in self.calc.D1:
            dC = np.matmul(D[None, None], Cc)
            parts.append(np.einsum("nqm,ncml->nqlc", V, dC))
        return np.stack(parts, axis=-1) / h[:, None, None, None, None]

    def constrained_edge_dofs(self, tags=(SIMPLY_SUPPORTED, FREE)):
        """Dofs pinned by the essential condition tau_nn = 0 on the tags."""
        em = self.n_edge_modes
        eids = self.mesh.edges_with_tag(tags)
        return (em * eids[:, None] + np.arange(em)).ravel()

    def free_dofs(self, tags=(SIMPLY_SUPPORTED, FREE)):
        mask = np.ones(self.ndof, dtype=bool)
        mask[self.constrained_edge_dofs(tags)] = False
        return np.nonzero(mask)[0]


class MomentField:
    """Coefficient vector over an HHJSpace."""

    def __init__(self, space, coeffs):
        self.space = space
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.coeffs.shape != (space.ndof,):
            raise ValueError("coefficient vector has wrong length")

    def _local(self, tids):
        return self.coeffs[self.space.cell_dofs[tids]]

    def tensors(self, tids, pts):
        B = self.space.basis_tensor(tids, pts)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))

    def divergences(self, tids, pts):
        B = self.space.basis_div(tids, pts)
        return np.einsum("nqlc,nl->nqc", B, self._local(tids))

    def double_divergences(self, tids, pts):
        B = self.space.basis_divdiv(tids, pts)
        return np.einsum("nql,nl->nq", B, self._local(tids))

    def tensor_gradients(self, tids, pts):
        B = self.space.basis_grad_tensor(tids, pts)
        return np.einsum("nqlcd,nl->nqcd", B, self._local(tids))

    def nn_values(self, tids, pts, normals):
        """n . tau n with one normal per row of tids."""
        t = self.tensors(tids, pts)
        n1, n2 = normals[:, 0:1], normals[:, 1:2]
        return t[..., 0] * n1 ** 2 + 2 * t[..., 1] * n1 * n2 + t[..., 2] * n2 ** 2

    def nt_values(self, tids, pts, normals):
        """t . tau n with the tangent obtained by rotating n by +pi/2."""
        t = self.tensors(tids, pts)
        n1, n2 = normals[:, 0:1], normals[:, 1:2]
        t1, t2 = -n2, n1
        return (t[..., 0] * t1 * n1 + t[..., 1] * (t1 * n2 + t2 * n1)
                + t[..., 2] * t2 * n2)


def interpolate_tensor(space, fn, quad_degree=None):
    """Interpolate a smooth symmetric tensor field into an HHJSpace.

    fn maps points (..., 2) to components (..., 3) ordered (xx, xy, yy).
    """
    mesh, d = space.mesh, space.degree
    qd = quad_degree if quad_degree is not None else 2 * d + 8
    dofs = np.empty(space.ndof)

    erule = edge_rule(qd)
    leg = shifted_legendre(erule.points, d)
    epts, _ = map_edge(erule, mesh.vertices[mesh.edges])
    vals = fn(epts)
    nrm = mesh.edge_normal
    nn = (vals[..., 0] * nrm[:, None, 0] ** 2
          + 2 * vals[..., 1] * nrm[:, None, 0] * nrm[:, None, 1]
          + vals[..., 2] * nrm[:, None, 1] ** 2)
    moments = np.einsum("eq,ql,q->el", nn, leg, erule.weights)
    dofs[: space.int_offset] = moments.ravel()

    if space.n_int:
        trule = triangle_rule(qd)
        tpts, _ = map_triangle(trule, mesh.tri_verts)
        xi = _scaled_points(mesh.centroid, mesh.diam, tpts)
        P = eval_monomials(xi, space.int_exps)
        tv = fn(tpts)
        tm = np.einsum("tqc,c,tql,q->tcl", tv, _HESS_METRIC, P, trule.weights)
        dofs[space.int_offset:] = tm.reshape(mesh.n_triangles, -1).ravel()
    return MomentField(space, dofs)
