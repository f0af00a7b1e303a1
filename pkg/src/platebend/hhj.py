"""Mixed method for the plate problem with normal-normal continuous
moment tensors.

Find sigma in M_h (degree k-1, sigma_nn = 0 on simply supported and
free edges) and u in V_h^0 (degree k) with

    a(sigma, tau) + b(tau, u) = 0          for all tau,
    b(sigma, v)              = -(f, v)     for all v,

where a(sigma, tau) = int sigma : tau and

    b(tau, v) = sum_T ( int_T div tau . grad v
                        - int_{dT} tau_nt d_t v ),

the boundary term using each element's outward normal and tangent.  The
second equation makes sigma an equilibrated moment tensor: its
distributional div div reproduces the load against every admissible
test function, so sigma feeds the error estimator directly.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .ipdg import SolverError, assemble_load, residual_tolerance
from .quadrature import edge_rule, map_edge, map_triangle, triangle_rule
from .spaces import _HESS_METRIC, HHJSpace, LagrangeSpace, MomentField, ScalarField


class HHJSystem:
    """Assembled saddle-point blocks over the unconstrained spaces.

    Attributes: mspace, vspace, A (moment Gram), B (b-form, scalar rows
    by moment columns), load (vector of (f, phi)).
    """

    def __init__(self, mesh, k, f, load_quad_degree=None):
        if k < 2:
            raise ValueError("mixed solve needs k >= 2")
        self.mesh = mesh
        self.k = k
        self.f = f
        self.load_quad_degree = load_quad_degree if load_quad_degree else 2 * k + 8
        self.mspace = HHJSpace(mesh, k - 1)
        self.vspace = LagrangeSpace(mesh, k)
        self._assemble()

    def _assemble(self):
        mesh, k = self.mesh, self.k
        mspace, vspace = self.mspace, self.vspace
        nT = mesh.n_triangles
        tids = np.arange(nT)
        rule = triangle_rule(2 * k)
        pts, wts = map_triangle(rule, mesh.tri_verts)

        T = mspace.basis_tensor(tids, pts)  # (nT, q, lm, 3)
        locA = np.einsum("nqic,c,nqjc,nq->nij", T, _HESS_METRIC, T, wts)
        rows = np.repeat(mspace.cell_dofs, mspace.n_loc, axis=1).ravel()
        cols = np.tile(mspace.cell_dofs, (1, mspace.n_loc)).ravel()
        self.A = sparse.coo_matrix(
            (locA.ravel(), (rows, cols)),
            shape=(mspace.ndof, mspace.ndof)).tocsr()

        # volume part of b: int div tau . grad v
        dv = mspace.basis_div(tids, pts)  # (nT, q, lm, 2)
        gv = vspace.basis_values(tids, pts, 1)  # (nT, q, lv, 2)
        locB = np.einsum("nqmc,nqvc,nq->nvm", dv, gv, wts)

        # boundary part: - tau_nt d_t v over each element edge, with the
        # outward frame; nt in the stored global frame is side
        # independent while d_t picks up the outward sign.
        erule = edge_rule(2 * k)
        nrm = mesh.edge_normal
        tng = mesh.edge_tangent
        nt_w = np.stack([nrm[:, 0] * tng[:, 0],
                         nrm[:, 0] * tng[:, 1] + nrm[:, 1] * tng[:, 0],
                         nrm[:, 1] * tng[:, 1]], axis=1)  # (nE, 3)
        epts_all, ewts_all = map_edge(erule, mesh.vertices[mesh.edges])
        for slot in range(3):
            eids = mesh.tri_edges[:, slot]
            sgn = mesh.tri_edge_sign[:, slot].astype(float)
            pts_e = epts_all[eids]
            Te = mspace.basis_tensor(tids, pts_e)
            nt = np.einsum("nqmc,nc->nqm", Te, nt_w[eids])
            ge = vspace.basis_values(tids, pts_e, 1)
            gt = np.einsum("nqvc,nc->nqv", ge, tng[eids])
            locB -= np.einsum("n,nqv,nqm,nq->nvm", sgn, gt, nt, ewts_all[eids])

        rows = np.repeat(vspace.cell_dofs, mspace.n_loc, axis=1).ravel()
        cols = np.tile(mspace.cell_dofs, (1, vspace.n_loc)).ravel()
        self.B = sparse.coo_matrix(
            (locB.ravel(), (rows, cols)),
            shape=(vspace.ndof, mspace.ndof)).tocsr()

        self.load = assemble_load(vspace, self.f, self.load_quad_degree)

    def b_form(self, tau, v):
        """Evaluate b on concrete fields through the assembled block."""
        return float(v.coeffs @ (self.B @ tau.coeffs))


def solve_hhj(mesh, k, f, boundary=None, load_quad_degree=None):
    """Solve the mixed system; returns (moment tensor, deflection).

    The saddle system over the free dofs is factored monolithically;
    iterative refinement holds the residual at the shared tolerance
    policy of the scalar solver.
    """
    if boundary is not None:
        mesh = mesh.retagged(boundary)
    sys = HHJSystem(mesh, k, f, load_quad_degree)
    mspace, vspace = sys.mspace, sys.vspace
    mf = mspace.free_dofs()
    vf = vspace.free_dofs()
    Aff = sys.A[mf][:, mf]
    Bf = sys.B[vf][:, mf]
    bf = sys.load[vf]

    sig = np.zeros(mspace.ndof)
    u = np.zeros(vspace.ndof)
    rhs = np.concatenate([np.zeros(len(mf)), -bf])
    norm_rhs = np.linalg.norm(rhs)
    if norm_rhs == 0.0:
        return MomentField(mspace, sig), ScalarField(vspace, u)

    S = sparse.bmat([[Aff, Bf.T], [Bf, None]], format="csc")
    try:
        lu = splu(S)
        z = lu.solve(rhs)
        resid = np.linalg.norm(S @ z - rhs)
        for _ in range(3):
            if resid <= 1e-11 * norm_rhs:
                break
            z = z + lu.solve(rhs - S @ z)
            resid = np.linalg.norm(S @ z - rhs)
    except RuntimeError as exc:
        raise SolverError(f"saddle factorization failed: {exc}") from exc
    tol = residual_tolerance(S, z, rhs)
    if not np.isfinite(resid) or resid > tol:
        raise SolverError(
            f"saddle residual {resid / norm_rhs:.3e} relative exceeds "
            f"{tol / norm_rhs:.3e}")
    sig[mf] = z[: len(mf)]
    u[vf] = z[len(mf):]
    return MomentField(mspace, sig), ScalarField(vspace, u)
