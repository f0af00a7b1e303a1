"""Error estimates built from the equilibrated moment tensor.

The report collects five components,

    eta_eq      = || grad^2 u_conf - sigma_eq ||_0
    eta_nonconf = | u_h - u_conf |_{2,h}
    eta_mean    = || grad^2_h u_h - sigma_mean ||_0,
                  sigma_mean = (grad^2 u_conf + sigma_eq) / 2
    eta_jump    = (sum_E (alpha/h_E) ||[dn u_h]||^2_E)^(1/2)
    eta_osc     = c_osc (sum_T h_T^4 ||f - fbar||^2_T)^(1/2)

and combines them into two guaranteed upper bounds for the DG-norm
error,

    basic    = sqrt(eta_nonconf^2 + eta_jump^2) + eta_eq + eta_osc
    improved = sqrt(eta_mean^2 + eta_jump^2) + eta_eq/2 + eta_osc.

fbar is the elementwise L2 projection of the load onto polynomials of
degree k-3, so for k = 2 the oscillation term measures the full load.
All integrals involving u_conf are taken on the three subtriangles of
the composite C1 element, where its Hessian is polynomial.
"""

import numpy as np

from .conforming import C1Field, l2_project_piecewise
from .ipdg import dg_norm, jump_indicator_per_edge
from .quadrature import map_triangle, triangle_rule
from .spaces import _HESS_METRIC

# Constant in front of the data oscillation majorant.  It bounds the
# negative-order norm of the residual load through two Poincare-type
# inequalities on a triangle; the value is the product of the optimal
# constants, rounded up in the last digit.
OSC_CONSTANT = 0.3682146

CSV_COLUMNS = ("dofV", "exact_err", "eta_eq", "eta_nonconf", "eta_osc",
               "eta_mean", "eta_jump", "eff_eq", "eff")


def _fmt(value):
    if value is None:
        return "nan"
    return format(float(value), ".9g")


class ErrorReport:
    """Per-element and global estimator components for one mesh level.

    The element_* arrays hold squared per-element contributions (the
    global components are square roots of their sums).  Components that
    need the conforming recovery or the equilibrated tensor may be
    None when those inputs were not supplied.
    """

    def __init__(self, dofV, eta_jump, eta_osc, eta_eq=None,
                 eta_nonconf=None, eta_mean=None, exact_err=None,
                 element_eq=None, element_nonconf=None, element_mean=None,
                 element_osc=None, edge_jump=None):
        self.dofV = int(dofV)
        self.eta_jump = float(eta_jump)
        self.eta_osc = float(eta_osc)
        self.eta_eq = None if eta_eq is None else float(eta_eq)
        self.eta_nonconf = None if eta_nonconf is None else float(eta_nonconf)
        self.eta_mean = None if eta_mean is None else float(eta_mean)
        self.exact_err = None if exact_err is None else float(exact_err)
        self.element_eq = element_eq
        self.element_nonconf = element_nonconf
        self.element_mean = element_mean
        self.element_osc = element_osc
        self.edge_jump = edge_jump          # (edge ids, squared values)

    @property
    def basic(self):
        """Triangle-inequality bound; needs eta_nonconf and eta_eq."""
        if self.eta_nonconf is None or self.eta_eq is None:
            return None
        return (np.sqrt(self.eta_nonconf ** 2 + self.eta_jump ** 2)
                + self.eta_eq + self.eta_osc)

    @property
    def improved(self):
        """Hypercircle bound through the averaged tensor."""
        if self.eta_mean is None or self.eta_eq is None:
            return None
        return (np.sqrt(self.eta_mean ** 2 + self.eta_jump ** 2)
                + 0.5 * self.eta_eq + self.eta_osc)

    @property
    def eff_eq(self):
        if self.exact_err is None or self.basic is None or self.exact_err == 0:
            return None
        return self.basic / self.exact_err

    @property
    def eff(self):
        if self.exact_err is None or self.improved is None or self.exact_err == 0:
            return None
        return self.improved / self.exact_err

    def element_indicator(self, component="eta_eq"):
        """Per-element marking indicator (square root of the local part).

        The jump component lives on edges; it is split evenly between
        the two neighbors (fully to the single neighbor on the
        boundary).
        """
        squared = {
            "eta_eq": self.element_eq,
            "eta_nonconf": self.element_nonconf,
            "eta_mean": self.element_mean,
            "eta_osc": self.element_osc,
        }
        if component in squared:
            vals = squared[component]
            if vals is None:
                raise ValueError(f"component {component} was not computed")
            return np.sqrt(vals)
        if component == "eta_jump":
            if self.edge_jump is None:
                raise ValueError("jump indicator was not computed")
            eids, vals, mesh = self.edge_jump
            out = np.zeros(mesh.n_triangles)
            t1 = mesh.edge_tris[eids, 0]
            t2 = mesh.edge_tris[eids, 1]
            shared = t2 >= 0
            np.add.at(out, t1, np.where(shared, 0.5, 1.0) * vals)
            np.add.at(out, t2[shared], 0.5 * vals[shared])
            return np.sqrt(out)
        raise ValueError(f"unknown estimator component {component}")

    def csv_row(self):
        vals = (self.dofV, self.exact_err, self.eta_eq, self.eta_nonconf,
                self.eta_osc, self.eta_mean, self.eta_jump, self.eff_eq,
                self.eff)
        return ",".join([str(self.dofV)] + [_fmt(v) for v in vals[1:]])


def _component_norm_sq(diff, wts):
    """Squared Frobenius L2 norm accumulated per element.

    diff holds symmetric tensor components (xx, xy, yy); the metric
    doubles the off-diagonal contribution.
    """
    return np.einsum("nqc,c,nqc,nq->n", diff, _HESS_METRIC, diff, wts)


def exact_dg_error(u_h, alpha, exact_hessian, quad_degree=None):
    """DG norm of the error against a known Hessian.

    The jump part uses the discrete solution alone since the exact
    deflection has continuous normal derivatives.
    """
    return dg_norm(u_h, alpha, exact_hessian=exact_hessian,
                   quad_degree=quad_degree).total


def compute_report(u_h, sigma_eq, u_conf, f, alpha, exact_hessian=None,
                   quad_degree=None, osc_quad_degree=None,
                   error_quad_degree=None):
    """Evaluate all estimator components on the mesh of u_h.

    sigma_eq may be the equilibration result object or a plain moment
    field; u_conf is the recovered C1 field.  Either may be None, in
    which case the components that need them are left unset.  f is the
    load as a pointwise callable.  exact_hessian, when given, supplies
    the exact solution's second derivatives for the reference error.
    """
    space = u_h.space
    mesh = space.mesh
    k = space.k
    sigma = getattr(sigma_eq, "sigma", sigma_eq)
    if u_conf is not None and not isinstance(u_conf, C1Field):
        raise TypeError("u_conf must be a C1 field (or None)")
    for other in (sigma, u_conf):
        if other is not None and other.space.mesh is not mesh:
            raise ValueError("fields live on different meshes")

    dofV = len(space.free_dofs())
    tids = np.arange(mesh.n_triangles)

    eids, jump_vals = jump_indicator_per_edge(u_h, alpha)
    eta_jump = float(np.sqrt(jump_vals.sum()))

    qd_osc = osc_quad_degree if osc_quad_degree else 2 * k + 8
    fbar = l2_project_piecewise(f, mesh, k - 3, quad_degree=qd_osc)
    orule = triangle_rule(qd_osc)
    opts, owts = map_triangle(orule, mesh.tri_verts)
    resid = f(opts) - fbar.values(tids, opts)
    element_osc = (OSC_CONSTANT ** 2 * mesh.diam ** 4
                   * np.einsum("nq,nq->n", resid ** 2, owts))
    eta_osc = float(np.sqrt(element_osc.sum()))

    eta_eq = eta_nonconf = eta_mean = None
    element_eq = element_nonconf = element_mean = None
    if u_conf is not None:
        qd = quad_degree if quad_degree else 2 * k + 2
        rule = triangle_rule(qd)
        element_nonconf = np.zeros(mesh.n_triangles)
        if sigma is not None:
            element_eq = np.zeros(mesh.n_triangles)
            element_mean = np.zeros(mesh.n_triangles)
        for s in range(3):
            pts, wts = map_triangle(rule, u_conf.space.sub_verts[:, s])
            Hc = u_conf.hessians_sub(tids, s, pts)
            Hh = u_h.hessians(tids, pts)
            element_nonconf += _component_norm_sq(Hh - Hc, wts)
            if sigma is not None:
                St = sigma.tensors(tids, pts)
                element_eq += _component_norm_sq(Hc - St, wts)
                element_mean += _component_norm_sq(Hh - 0.5 * (Hc + St), wts)
        eta_nonconf = float(np.sqrt(element_nonconf.sum()))
        if sigma is not None:
            eta_eq = float(np.sqrt(element_eq.sum()))
            eta_mean = float(np.sqrt(element_mean.sum()))

    exact_err = None
    if exact_hessian is not None:
        exact_err = exact_dg_error(u_h, alpha, exact_hessian,
                                   quad_degree=error_quad_degree)

    return ErrorReport(dofV, eta_jump, eta_osc, eta_eq=eta_eq,
                       eta_nonconf=eta_nonconf, eta_mean=eta_mean,
                       exact_err=exact_err, element_eq=element_eq,
                       element_nonconf=element_nonconf,
                       element_mean=element_mean, element_osc=element_osc,
                       edge_jump=(eids, jump_vals, mesh))


def guaranteed_bound_basic(report):
    """Triangle-inequality bound from a complete report."""
    val = report.basic
    if val is None:
        raise ValueError("report is missing the conforming components")
    return float(val)


def guaranteed_bound_improved(report):
    """Averaged-tensor bound from a complete report."""
    val = report.improved
    if val is None:
        raise ValueError("report is missing the conforming components")
    return float(val)
