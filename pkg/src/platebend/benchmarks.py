"""Benchmark problems: exact solutions, loads, and boundary layouts.

Three cases are provided.  A smooth manufactured solution on the
clamped unit square for rate checks, the singular solution on the
L-shaped domain whose load is obtained by exact differentiation, and
the mixed-boundary uniform-load plate on the unit square whose
reference solution is an overkill mixed solve.

The singular solution is a polynomial cutoff times r^(1+z) g(phi).
Its derivatives and load are computed symbolically in a small algebra
of functions sum_j r^(a_j) T_j(phi), where the exponents a_j and the
frequencies of the trigonometric polynomials T_j are integers plus
integer multiples of z.  Keeping the z-multiplicity symbolic makes the
biharmonic cancellation of the singular core exact: the Laplacian
factor a^2 - mu^2 vanishes structurally, not through floating-point
subtraction, so the load never contains the spurious r^(z-3) terms
that would otherwise blow up near the corner.
"""

import os

import numpy as np

from .hhj import solve_hhj
from .mesh import (CLAMPED, FREE, SIMPLY_SUPPORTED, BoundarySpec,
                   make_lshape_mesh, make_square_mesh)

OMEGA = 1.5 * np.pi
Z_NOMINAL = 0.5444837


# ----------------------------------------------------------------------
# polar function algebra


def _canon_freq(m, zn):
    """Canonical key for the frequency m + zn*z, with the sin sign."""
    if zn < 0 or (zn == 0 and m < 0):
        return (-m, -zn), -1.0
    return (m, zn), 1.0


class TrigPoly:
    """cos/sin combination with frequencies of the form m + zn*z."""

    __slots__ = ("z", "terms")

    def __init__(self, z, terms=None):
        self.z = z
        self.terms = {}
        if terms:
            for (m, zn), (c, s) in terms.items():
                self.add(m, zn, c, s)

    def add(self, m, zn, ccos, csin):
        key, sgn = _canon_freq(m, zn)
        entry = self.terms.setdefault(key, [0.0, 0.0])
        entry[0] += ccos
        entry[1] += sgn * csin

    def __add__(self, other):
        out = TrigPoly(self.z)
        for (m, zn), (c, s) in self.terms.items():
            out.add(m, zn, c, s)
        for (m, zn), (c, s) in other.terms.items():
            out.add(m, zn, c, s)
        return out

    def scaled(self, factor):
        out = TrigPoly(self.z)
        for (m, zn), (c, s) in self.terms.items():
            out.add(m, zn, factor * c, factor * s)
        return out

    def __mul__(self, other):
        """Product via the product-to-sum identities."""
        out = TrigPoly(self.z)
        for (m1, z1), (c1, s1) in self.terms.items():
            for (m2, z2), (c2, s2) in other.terms.items():
                dm, dz = m1 - m2, z1 - z2
                pm, pz = m1 + m2, z1 + z2
                # cos*cos and sin*sin
                out.add(dm, dz, 0.5 * (c1 * c2 + s1 * s2), 0.0)
                out.add(pm, pz, 0.5 * (c1 * c2 - s1 * s2), 0.0)
                # cos*sin and sin*cos
                out.add(pm, pz, 0.0, 0.5 * (c1 * s2 + s1 * c2))
                out.add(dm, dz, 0.0, 0.5 * (s1 * c2 - s2 * c1))
        return out

    def dphi(self):
        out = TrigPoly(self.z)
        for (m, zn), (c, s) in self.terms.items():
            mu = m + zn * self.z
            out.add(m, zn, mu * s, -mu * c)
        return out

    def max_abs(self):
        vals = [abs(v) for e in self.terms.values() for v in e]
        return max(vals) if vals else 0.0

    def pruned(self, tol):
        out = TrigPoly(self.z)
        for (m, zn), (c, s) in self.terms.items():
            c = c if abs(c) > tol else 0.0
            s = s if abs(s) > tol else 0.0
            if c or s:
                out.add(m, zn, c, s)
        return out

    def eval(self, phi):
        total = np.zeros_like(phi)
        for (m, zn), (c, s) in self.terms.items():
            mu = m + zn * self.z
            arg = mu * phi
            total = total + c * np.cos(arg) + s * np.sin(arg)
        return total


class PolarFun:
    """Sum of r^(n + zn*z) * TrigPoly(phi) terms."""

    __slots__ = ("z", "terms")

    def __init__(self, z, terms=None):
        self.z = z
        self.terms = dict(terms) if terms else {}

    def _accum(self, key, trig):
        if key in self.terms:
            self.terms[key] = self.terms[key] + trig
        else:
            self.terms[key] = trig

    def __add__(self, other):
        out = PolarFun(self.z, self.terms)
        out.terms = dict(self.terms)
        for key, trig in other.terms.items():
            out._accum(key, trig)
        return out

    def scaled(self, factor):
        return PolarFun(self.z, {k: t.scaled(factor)
                                 for k, t in self.terms.items()})

    def __sub__(self, other):
        return self + other.scaled(-1.0)

    def __mul__(self, other):
        out = PolarFun(self.z)
        for (n1, z1), t1 in self.terms.items():
            for (n2, z2), t2 in other.terms.items():
                out._accum((n1 + n2, z1 + z2), t1 * t2)
        return out

    def _directional(self, radial_coeff, angular_coeff):
        """Shared body of d/dx and d/dy.

        d/dx = cos(phi) d/dr - sin(phi)/r d/dphi and
        d/dy = sin(phi) d/dr + cos(phi)/r d/dphi; both multipliers are
        given as (cos, sin) coefficient pairs.
        """
        out = PolarFun(self.z)
        for (n, zn), trig in self.terms.items():
            a = n + zn * self.z
            radial = TrigPoly(self.z, {(1, 0): radial_coeff})
            angular = TrigPoly(self.z, {(1, 0): angular_coeff})
            piece = (radial * trig).scaled(a) + angular * trig.dphi()
            out._accum((n - 1, zn), piece)
        return out

    def dx(self):
        return self._directional((1.0, 0.0), (0.0, -1.0))

    def dy(self):
        return self._directional((0.0, 1.0), (1.0, 0.0))

    def laplacian(self):
        """Termwise (a^2 - mu^2) r^(a-2), exact on harmonic pairs."""
        out = PolarFun(self.z)
        for (n, zn), trig in self.terms.items():
            shifted = TrigPoly(self.z)
            for (m, zm), (c, s) in trig.terms.items():
                if (n == m and zn == zm) or (n == -m and zn == -zm):
                    continue
                a = n + zn * self.z
                mu = m + zm * self.z
                factor = (a - mu) * (a + mu)
                shifted.add(m, zm, factor * c, factor * s)
            if shifted.terms:
                out._accum((n - 2, zn), shifted)
        return out

    def max_abs(self):
        vals = [t.max_abs() for t in self.terms.values()]
        return max(vals) if vals else 0.0

    def pruned(self, rel=1e-14):
        tol = rel * self.max_abs()
        out = PolarFun(self.z)
        for key, trig in self.terms.items():
            small = trig.pruned(tol)
            if small.terms:
                out._accum(key, small)
        return out

    def eval(self, pts):
        # keep the input dtype so extended-precision probes stay extended
        pts = np.asarray(pts)
        x, y = pts[..., 0], pts[..., 1]
        r = np.hypot(x, y)
        phi = np.arctan2(y, x)
        phi = np.where(phi < -1e-12, phi + 2.0 * np.pi, phi)
        total = np.zeros_like(r)
        for (n, zn), trig in self.terms.items():
            a = n + zn * self.z
            total = total + r ** a * trig.eval(phi)
        return total


def polar_x(z):
    return PolarFun(z, {(1, 0): TrigPoly(z, {(1, 0): (1.0, 0.0)})})


def polar_y(z):
    return PolarFun(z, {(1, 0): TrigPoly(z, {(1, 0): (0.0, 1.0)})})


def polar_const(z, value):
    return PolarFun(z, {(0, 0): TrigPoly(z, {(0, 0): (value, 0.0)})})


# ----------------------------------------------------------------------
# benchmark case container


class ExactSolution:
    """Pointwise value, gradient, and Hessian of a known solution."""

    def __init__(self, value, gradient, hessian):
        self.value = value
        self.gradient = gradient
        self.hessian = hessian


class BenchmarkCase:
    """Problem data bundle: domain, boundary layout, load, exact fields.

    The exact solution may be expensive to produce (the mixed-boundary
    case solves an overkill reference problem), so it is built lazily
    on first access.
    """

    def __init__(self, name, mesh_builder, f, alpha0=1.0,
                 exact_factory=None, load_quad_degree=None,
                 error_quad_degree=None):
        self.name = name
        self._mesh_builder = mesh_builder
        self.f = f
        self.alpha0 = alpha0
        self._exact_factory = exact_factory
        self._exact = None
        self._load_qd = load_quad_degree
        self._error_qd = error_quad_degree

    def mesh(self, n):
        return self._mesh_builder(n)

    @property
    def has_exact(self):
        return self._exact_factory is not None

    @property
    def exact(self):
        if self._exact is None and self._exact_factory is not None:
            self._exact = self._exact_factory()
        return self._exact

    def load_quad_degree(self, k):
        return self._load_qd(k) if self._load_qd else None

    def error_quad_degree(self, k):
        return self._error_qd(k) if self._error_qd else None


# ----------------------------------------------------------------------
# smooth manufactured case


def smooth_manufactured_case():
    """u = sin^2(pi x) sin^2(pi y) on the clamped unit square."""
    two_pi = 2.0 * np.pi

    def value(pts):
        x, y = pts[..., 0], pts[..., 1]
        return np.sin(np.pi * x) ** 2 * np.sin(np.pi * y) ** 2

    def gradient(pts):
        x, y = pts[..., 0], pts[..., 1]
        sx2 = np.sin(np.pi * x) ** 2
        sy2 = np.sin(np.pi * y) ** 2
        gx = np.pi * np.sin(two_pi * x) * sy2
        gy = np.pi * np.sin(two_pi * y) * sx2
        return np.stack([gx, gy], axis=-1)

    def hessian(pts):
        x, y = pts[..., 0], pts[..., 1]
        sx2 = np.sin(np.pi * x) ** 2
        sy2 = np.sin(np.pi * y) ** 2
        hxx = 2.0 * np.pi ** 2 * np.cos(two_pi * x) * sy2
        hxy = np.pi ** 2 * np.sin(two_pi * x) * np.sin(two_pi * y)
        hyy = 2.0 * np.pi ** 2 * np.cos(two_pi * y) * sx2
        return np.stack([hxx, hxy, hyy], axis=-1)

    def load(pts):
        x, y = pts[..., 0], pts[..., 1]
        cx = np.cos(two_pi * x)
        cy = np.cos(two_pi * y)
        return 4.0 * np.pi ** 4 * (-cx - cy + 4.0 * cx * cy)

    return BenchmarkCase(
        "smooth",
        lambda n: make_square_mesh(n, BoundarySpec.uniform(CLAMPED)),
        load,
        exact_factory=lambda: ExactSolution(value, gradient, hessian))


# ----------------------------------------------------------------------
# singular solution on the L-shaped domain


def characteristic_residual(z, omega=OMEGA):
    """Defect of sin^2(omega z) = z^2 sin^2(omega)."""
    return np.sin(omega * z) ** 2 - z ** 2 * np.sin(omega) ** 2


def refine_root(z0=Z_NOMINAL, omega=OMEGA):
    """Polish the singular exponent by Newton iteration.

    The published seven-digit value leaves a residual around 1e-7 in
    the characteristic equation, which would leak into the boundary
    values of g at the re-entrant edges; a few Newton steps push the
    defect to rounding level.
    """
    z = float(z0)
    for _ in range(8):
        f = np.sin(omega * z) ** 2 - z ** 2 * np.sin(omega) ** 2
        df = omega * np.sin(2.0 * omega * z) - 2.0 * z * np.sin(omega) ** 2
        step = f / df
        z -= step
        if abs(step) < 1e-15:
            break
    return z


def _singular_part(z):
    """r^(1+z) g(phi) with g vanishing to first order at 0 and omega."""
    omega = OMEGA
    c1 = (np.sin((z - 1) * omega) / (z - 1)
          - np.sin((z + 1) * omega) / (z + 1))
    c2 = np.cos((z - 1) * omega) - np.cos((z + 1) * omega)
    g = TrigPoly(z)
    g.add(-1, 1, c1, -c2 / (z - 1))     # frequency z - 1
    g.add(1, 1, -c1, c2 / (z + 1))      # frequency z + 1
    return PolarFun(z, {(1, 1): g})


def lshape_singular_case():
    """Clamped plate on the L-shaped domain with a corner singularity.

    The deflection is (x^2-1)^2 (y^2-1)^2 r^(1+z) g(phi); the squared
    polynomial factors clamp the outer boundary while g handles the two
    edges meeting at the re-entrant corner.  The load is the symbolic
    double Laplacian.
    """
    z = refine_root()
    one = polar_const(z, 1.0)
    x2 = polar_x(z) * polar_x(z)
    y2 = polar_y(z) * polar_y(z)
    cutoff = (x2 - one) * (x2 - one) * (y2 - one) * (y2 - one)
    u = (cutoff * _singular_part(z)).pruned()

    ux, uy = u.dx().pruned(), u.dy().pruned()
    uxx, uxy, uyy = ux.dx().pruned(), ux.dy().pruned(), uy.dy().pruned()
    load_fun = u.laplacian().laplacian().pruned()

    def value(pts):
        return u.eval(pts)

    def gradient(pts):
        return np.stack([ux.eval(pts), uy.eval(pts)], axis=-1)

    def hessian(pts):
        return np.stack([uxx.eval(pts), uxy.eval(pts), uyy.eval(pts)],
                        axis=-1)

    case = BenchmarkCase(
        "lshape",
        lambda n: make_lshape_mesh(n, BoundarySpec.uniform(CLAMPED)),
        load_fun.eval,
        exact_factory=lambda: ExactSolution(value, gradient, hessian),
        # the load behaves like r^(z-1) at the corner; raise the
        # quadrature degree so the moment integrals stay accurate
        load_quad_degree=lambda k: 2 * k + 10,
        error_quad_degree=lambda k: 2 * k + 10)
    case.z = z
    case.z_nominal = Z_NOMINAL
    case.omega = OMEGA
    return case


# ----------------------------------------------------------------------
# mixed boundary conditions with an overkill reference


def _timoshenko_boundary():
    return BoundarySpec.square_sides(left=SIMPLY_SUPPORTED,
                                     right=SIMPLY_SUPPORTED,
                                     bottom=CLAMPED, top=FREE)


class GridEvaluator:
    """Point evaluation of fields on a structured unit-square mesh.

    Elements come in pairs per grid cell, split along the diagonal of
    positive slope; locating a point is integer arithmetic.
    """

    def __init__(self, n):
        self.n = n

    def locate(self, flat):
        n = self.n
        x = np.clip(flat[:, 0], 0.0, np.nextafter(1.0, 0.0))
        y = np.clip(flat[:, 1], 0.0, np.nextafter(1.0, 0.0))
        i = np.minimum((x * n).astype(int), n - 1)
        j = np.minimum((y * n).astype(int), n - 1)
        upper = (y * n - j) > (x * n - i)
        return 2 * (j * n + i) + upper

    def scalar(self, field, pts, order=0):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        tids = self.locate(flat)
        if order == 0:
            vals = field.values(tids, flat[:, None, :])[:, 0]
            return vals.reshape(pts.shape[:-1])
        vals = field.gradients(tids, flat[:, None, :])[:, 0]
        return vals.reshape(pts.shape[:-1] + (2,))

    def tensor(self, field, pts):
        pts = np.asarray(pts, dtype=float)
        flat = pts.reshape(-1, 2)
        tids = self.locate(flat)
        vals = field.tensors(tids, flat[:, None, :])[:, 0]
        return vals.reshape(pts.shape[:-1] + (3,))


REFERENCE_N = 72
REFERENCE_CHECK_N = 36
REFERENCE_K = 3


def _cache_dir():
    root = os.environ.get("PLATEBEND_CACHE")
    if not root:
        root = os.path.join(os.path.expanduser("~"), ".cache", "platebend")
    os.makedirs(root, exist_ok=True)
    return root


def _reference_fields(n):
    """Overkill mixed solve for the uniform-load mixed-boundary plate.

    Cached on disk; the solve is large (a few hundred thousand saddle
    unknowns at the default resolution) and byte-identical between
    runs.
    """
    from .spaces import HHJSpace, LagrangeSpace, MomentField, ScalarField

    path = os.path.join(_cache_dir(), f"timoshenko_ref_k{REFERENCE_K}_n{n}.npz")
    mesh = make_square_mesh(n, _timoshenko_boundary())
    if os.path.exists(path):
        data = np.load(path)
        sigma = MomentField(HHJSpace(mesh, REFERENCE_K - 1), data["sigma"])
        u = ScalarField(LagrangeSpace(mesh, REFERENCE_K), data["u"])
        return sigma, u
    load = lambda pts: np.ones(pts.shape[:-1])
    sigma, u = solve_hhj(mesh, REFERENCE_K, load)
    np.savez_compressed(path, sigma=sigma.coeffs, u=u.coeffs)
    return sigma, u


def reference_self_distance():
    """Relative moment-field distance between the two reference levels."""
    sigma_f, _ = _reference_fields(REFERENCE_N)
    sigma_c, _ = _reference_fields(REFERENCE_CHECK_N)
    mesh = sigma_f.space.mesh
    from .quadrature import map_triangle, triangle_rule
    from .spaces import _HESS_METRIC
    rule = triangle_rule(8)
    tids = np.arange(mesh.n_triangles)
    pts, wts = map_triangle(rule, mesh.tri_verts)
    coarse = GridEvaluator(REFERENCE_CHECK_N).tensor(sigma_c, pts)
    fine = sigma_f.tensors(tids, pts)
    diff = fine - coarse
    num = np.einsum("nqc,c,nqc,nq->", diff, _HESS_METRIC, diff, wts)
    den = np.einsum("nqc,c,nqc,nq->", fine, _HESS_METRIC, fine, wts)
    return float(np.sqrt(num / den))


def timoshenko_mixed_case():
    """Uniform load, simply supported sides, clamped bottom, free top.

    The exact solution is not in closed form here; the case carries a
    high-accuracy discrete reference instead.  The moment tensor of the
    overkill mixed solve stands in for the exact Hessian.
    """

    def load(pts):
        return np.ones(pts.shape[:-1])

    def factory():
        sigma, u = _reference_fields(REFERENCE_N)
        ev = GridEvaluator(REFERENCE_N)
        return ExactSolution(
            lambda pts: ev.scalar(u, pts),
            lambda pts: ev.scalar(u, pts, order=1),
            lambda pts: ev.tensor(sigma, pts))

    return BenchmarkCase(
        "timoshenko",
        lambda n: make_square_mesh(n, _timoshenko_boundary()),
        load,
        alpha0=2.0,
        exact_factory=factory)


CASES = {
    "smooth": smooth_manufactured_case,
    "lshape": lshape_singular_case,
    "timoshenko": timoshenko_mixed_case,
}


def get_case(name):
    try:
        builder = CASES[name]
    except KeyError:
        raise KeyError(f"unknown case {name!r}; pick one of "
                       f"{sorted(CASES)}") from None
    return builder()


def alpha_sweep(case, mesh, k, alpha0s, with_exact=True):
    """One full solve / equilibrate / estimate pipeline per penalty value.

    Returns a list of (alpha0, ErrorReport).
    """
    from .conforming import C1Space, project_conforming
    from .equilibration import equilibrate_from_dg
    from .estimator import compute_report
    from .ipdg import IPDGProblem, solve

    exact_hessian = None
    if with_exact and case.has_exact:
        exact_hessian = case.exact.hessian
    out = []
    for a0 in alpha0s:
        if a0 <= 0:
            raise ValueError("penalty scale must be positive")
        problem = IPDGProblem(mesh, k, case.f, alpha0=a0,
                              load_quad_degree=case.load_quad_degree(k))
        u_h = solve(problem)
        sigma = equilibrate_from_dg(u_h, problem.alpha, case.f,
                                    load_quad_degree=case.load_quad_degree(k))
        variant = "rhct" if k == 2 else "ct"
        u_conf = project_conforming(u_h, C1Space(mesh, variant))
        report = compute_report(u_h, sigma, u_conf, case.f, problem.alpha,
                                exact_hessian=exact_hessian,
                                error_quad_degree=case.error_quad_degree(k))
        out.append((a0, report))
    return out
