"""Marking and the adaptive solve-estimate-mark-refine loop."""

import numpy as np

from .conforming import C1Space, project_conforming
from .equilibration import equilibrate_from_dg
from .estimator import compute_report
from .ipdg import IPDGProblem, solve
from .mesh import refine


class AdaptiveError(RuntimeError):
    """Failure inside the loop, tagged with the level it happened on."""

    def __init__(self, level, stage, cause):
        super().__init__(f"level {level}, {stage}: {cause}")
        self.level = level
        self.stage = stage


def mark(eta, theta):
    """Element ids with eta strictly above theta times the maximum.

    The rule is scale invariant; an all-zero input marks nothing.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        raise ValueError("need at least one element")
    top = eta.max()
    if top <= 0.0:
        return np.zeros(0, dtype=int)
    return np.nonzero(eta > theta * top)[0]


def mark_dorfler(eta, fraction):
    """Smallest prefix of elements carrying the given share of sum(eta^2)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    eta = np.asarray(eta, dtype=float)
    if eta.size == 0:
        raise ValueError("need at least one element")
    order = np.argsort(-eta, kind="stable")
    csum = np.cumsum(eta[order] ** 2)
    total = csum[-1]
    if total <= 0.0:
        return np.zeros(0, dtype=int)
    count = int(np.searchsorted(csum, fraction * total)) + 1
    return np.sort(order[:count])


class AdaptiveConfig:
    """Knobs of the adaptive loop.

    component picks the per-element indicator used for marking;
    strategy is "max" (threshold rule, the default) or "dorfler".
    dof_budget caps the deflection unknowns of the levels that are run.
    """

    def __init__(self, theta=0.25, max_levels=30, dof_budget=200000,
                 component="eta_eq", strategy="max", dorfler_fraction=0.5):
        if not 0.0 < theta <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if max_levels < 1:
            raise ValueError("need at least one level")
        if strategy not in ("max", "dorfler"):
            raise ValueError(f"unknown marking strategy {strategy}")
        self.theta = float(theta)
        self.max_levels = int(max_levels)
        self.dof_budget = int(dof_budget)
        self.component = component
        self.strategy = strategy
        self.dorfler_fraction = float(dorfler_fraction)

    def select(self, eta):
        if self.strategy == "dorfler":
            return mark_dorfler(eta, self.dorfler_fraction)
        return mark(eta, self.theta)


class LevelResult:
    """Everything the loop produced on one mesh level."""

    def __init__(self, level, mesh, u_h, sigma, u_conf, report, marked):
        self.level = level
        self.mesh = mesh
        self.u_h = u_h
        self.sigma = sigma
        self.u_conf = u_conf
        self.report = report
        self.marked = marked


def _conforming_variant(k):
    # the reduced composite element has cubic subtriangles and matches
    # the quadratic solve; higher orders use the full element
    return "rhct" if k == 2 else "ct"


def adaptive_loop(mesh, k, f, alpha=None, alpha0=None, config=None,
                  exact_hessian=None, load_quad_degree=None,
                  error_quad_degree=None, callback=None):
    """Run solve / equilibrate / recover / estimate / mark / refine.

    Returns the list of LevelResult in level order.  The loop stops
    when the level cap is reached, when a refined mesh would exceed
    the dof budget, or when nothing is marked.  callback, if given, is
    invoked with each LevelResult as it completes.
    """
    if config is None:
        config = AdaptiveConfig()
    results = []
    for level in range(config.max_levels):
        try:
            problem = IPDGProblem(mesh, k, f, alpha=alpha, alpha0=alpha0,
                                  load_quad_degree=load_quad_degree)
        except Exception as exc:
            raise AdaptiveError(level, "setup", exc) from exc
        if level > 0 and len(problem.space.free_dofs()) > config.dof_budget:
            break
        try:
            u_h = solve(problem)
        except Exception as exc:
            raise AdaptiveError(level, "solve", exc) from exc
        try:
            sigma = equilibrate_from_dg(u_h, problem.alpha, f,
                                        load_quad_degree=load_quad_degree)
        except Exception as exc:
            raise AdaptiveError(level, "equilibration", exc) from exc
        try:
            cspace = C1Space(mesh, _conforming_variant(k))
            u_conf = project_conforming(u_h, cspace)
        except Exception as exc:
            raise AdaptiveError(level, "conforming recovery", exc) from exc
        try:
            report = compute_report(u_h, sigma, u_conf, f, problem.alpha,
                                    exact_hessian=exact_hessian,
                                    error_quad_degree=error_quad_degree)
        except Exception as exc:
            raise AdaptiveError(level, "estimation", exc) from exc
        try:
            eta = report.element_indicator(config.component)
            marked = config.select(eta)
        except Exception as exc:
            raise AdaptiveError(level, "marking", exc) from exc
        result = LevelResult(level, mesh, u_h, sigma, u_conf, report, marked)
        results.append(result)
        if callback is not None:
            callback(result)
        if len(marked) == 0:
            break
        try:
            mesh, _ = refine(mesh, marked)
        except Exception as exc:
            raise AdaptiveError(level, "refinement", exc) from exc
    return results
