"""Influence functions and gross-error sensitivity of moving horizon estimators.

For a solved window with stacked solution ``X``, replacing each measurement
cost by ``(1 - eps) h(y_i) + eps h(z_i)`` moves the solution at the rate

    IF(z) = d X / d eps = -M1^{-1} M2,

where ``M1`` is the objective Hessian at ``X`` and ``M2`` stacks, per window
state, the gradient of ``K(x_i) = log-score(y_i | x_i) - log-score(z_i | x_i)``.
The arrival state has no measurement, so its block of ``M2`` is zero.
For the Gaussian cost the score is the log-likelihood; for the beta cost it is
``(beta + 1) / beta * g(y | x)^beta``. In both cases

    dK/dx_i = G_i' W (w(y_i) r(y_i) - w(z_i) r(z_i)),

with ``W = R^-1`` and the residual weight ``w`` equal to 1 (Gaussian) or
``(beta + 1) c exp(-beta/2 |r|^2_W)`` (beta), ``c = ((2 pi)^m |R|)^(-beta/2)``.

The IF here is a vector: one stacked trajectory perturbation per
contamination point ``z``. A single ``z`` of shape ``(m,)`` is shared by
every window step; an array of shape ``(T, m)`` sets one point per step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy import optimize

from ._linalg import psd_sqrt
from .errors import AssumptionViolatedError, EstimateFailedError, PreconditionError
from .mhe import Beta, Standard, _WindowProblem, solve_window
from .models import as_nonlinear
from .solver import SolverConfig, finite_difference_hessian

STATIONARITY_TOL = 1e-6
# condition number beyond which M1 is treated as singular
MAX_CONDITION = 1e12
TIGHT_SOLVER = SolverConfig(max_iterations=300, gradient_tolerance=1e-11, step_tolerance=1e-15)


@dataclass
class InfluenceResult:
    influence: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    z: np.ndarray

    def norm(self):
        return float(np.linalg.norm(self.influence))


def _z_targets(window, z):
    z = np.asarray(z, dtype=float)
    shape = window.measurements.shape
    if z.ndim <= 1:
        z = np.broadcast_to(np.atleast_1d(z), shape)
    if z.shape != shape:
        raise ValueError(f"z must have shape ({shape[1]},) or {shape}, got {z.shape}")
    return z


def _score_gradient(problem, X, ys):
    """Per-step ``G_i' W w(y_i) r(y_i)`` stacked over the window (arrival block zero)."""
    nl, meas, n = problem.nl, problem.meas, problem.n
    out = np.zeros((problem.T + 1) * n)
    for i in range(1, problem.T + 1):
        x = X[i]
        r = nl.innovation(ys[i - 1], nl.g(x))
        wt = meas.weight(float(r @ meas.W @ r))
        out[i * n:(i + 1) * n] = nl.G(x).T @ (wt * (meas.W @ r))
    return out


def _check_nonsingular(M1):
    try:
        cond = np.linalg.cond(M1)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise AssumptionViolatedError(f"objective Hessian is singular at the solution (cond={cond:.3g})")


def influence_function(window, solution, model, kind=Standard(), z=None, hessian="exact",
                       stationarity_tol=STATIONARITY_TOL) -> InfluenceResult:
    """Analytic influence of contamination at ``z`` on the solved window.

    ``hessian="fd"`` differentiates the analytic gradient numerically instead
    of using the exact second derivatives.
    """
    if z is None:
        raise ValueError("a contamination point z is required")
    problem = _WindowProblem(window, model, kind)
    X = problem.unstack(solution)
    flat = X.reshape(-1)
    grad = problem.gradient(flat)
    gnorm = float(np.linalg.norm(grad))
    if gnorm >= stationarity_tol:
        raise PreconditionError(f"solution is not stationary: gradient norm {gnorm:.3g}")
    if hessian == "exact":
        M1 = problem.derivatives(flat, exact=True)[1]
    elif hessian == "fd":
        M1 = finite_difference_hessian(problem.gradient, flat)
    else:
        raise ValueError(f"unknown hessian mode {hessian!r}")
    _check_nonsingular(M1)
    zs = _z_targets(window, z)
    M2 = _score_gradient(problem, X, window.measurements) - _score_gradient(problem, X, zs)
    infl = -np.linalg.solve(M1, M2)
    return InfluenceResult(infl, M1, M2, np.array(z, dtype=float))


def empirical_influence(window, model, kind=Standard(), z=None, eps=1e-5, solution=None,
                        solver: SolverConfig = TIGHT_SOLVER, extrapolate=False):
    """``(X(z, eps) - X) / eps`` from two solves of the window.

    ``X`` is the uncontaminated solution (solved here unless given) and
    ``X(z, eps)`` the solution with each measurement cost replaced by its
    eps-contaminated mixture. The quotient carries an ``O(eps)`` bias;
    ``extrapolate=True`` returns ``2 D(eps/2) - D(eps)`` instead, which
    cancels it at the cost of one more solve.
    """
    if z is None:
        raise ValueError("a contamination point z is required")
    if not 0.0 < eps <= 0.01:
        raise ValueError(f"eps must lie in (0, 0.01], got {eps}")
    zs = _z_targets(window, z)
    if solution is None:
        X, rep = solve_window(window, model, kind, solver)
        _require_solved(rep, window)
    else:
        X = np.asarray(solution, dtype=float)
        # polish a supplied solution to the same tolerance as the perturbed solve
        X, rep = solve_window(window, model, kind, solver, initial=X)
        _require_solved(rep, window)
    X = _newton_refine(_WindowProblem(window, model, kind), X)

    def quotient(e):
        Xe, rep = solve_window(window, model, kind, solver, initial=X, contamination=(zs, e))
        _require_solved(rep, window)
        Xe = _newton_refine(_WindowProblem(window, model, kind, (zs, e)), Xe)
        return (Xe - X).reshape(-1) / e

    if extrapolate:
        return 2 * quotient(eps / 2) - quotient(eps)
    return quotient(eps)


def _newton_refine(problem, X, max_steps=20):
    """Undamped Newton steps while the gradient norm keeps falling.

    The contamination shifts the gradient by ``O(eps)``, which can sit below
    any fixed gradient tolerance; Newton's quadratic convergence drives both
    solves down to rounding level instead.
    """
    x = np.asarray(X, dtype=float).reshape(-1)
    g = problem.gradient(x)
    gnorm = np.linalg.norm(g)
    for _ in range(max_steps):
        if gnorm == 0.0:
            break
        try:
            x_new = x - np.linalg.solve(problem.derivatives(x, exact=True)[1], g)
        except np.linalg.LinAlgError:
            break
        g_new = problem.gradient(x_new)
        n_new = np.linalg.norm(g_new)
        if not np.isfinite(n_new) or n_new >= gnorm:
            break
        x, g, gnorm = x_new, g_new, n_new
    return problem.unstack(x)


def _require_solved(report, window):
    if not report.converged and report.gradient_norm >= STATIONARITY_TOL:
        raise EstimateFailedError(
            f"window solve at t={window.t} ended with status {report.status.value}",
            report=report, step=window.t)


# --------------------------------------------------------------------------
# gross-error sensitivity


def rho_closed_form(G, R, beta):
    """Supremum over z of ``|rho(x, z)|`` for Jacobian ``G`` and noise ``R``.

    ``|rho|`` along ``u = z - g(x)`` is ``(beta+1) c |G' R^-1 u| exp(-beta/2 |u|^2_{R^-1})``;
    writing ``u = R^(1/2) v`` it peaks on the top right singular vector of
    ``G' R^(-1/2)`` at ``|v|^2 = 1/beta``.
    """
    R = np.atleast_2d(R)
    m = R.shape[0]
    c = math.exp(-0.5 * beta * (m * math.log(2 * math.pi) + np.linalg.slogdet(R)[1]))
    Rih = np.linalg.inv(psd_sqrt(R))
    _, s, vt = np.linalg.svd(np.atleast_2d(G).T @ Rih)
    u_star = psd_sqrt(R) @ vt[0] / math.sqrt(beta)
    value = (beta + 1) * c * s[0] * math.exp(-0.5) / math.sqrt(beta)
    return value, u_star


def rho_max(states, model, beta, seeds=None):
    """Numeric ``max_i sup_z |rho(x_i, z)|`` refined by Nelder-Mead.

    Each state is searched from the closed-form stationary point plus any
    extra residual ``seeds``. Returns ``(numeric, closed_form)``.
    """
    nl = as_nonlinear(model)
    W = np.linalg.inv(nl.R)
    m = nl.m
    c = math.exp(-0.5 * beta * (m * math.log(2 * math.pi) + np.linalg.slogdet(nl.R)[1]))
    scale = (beta + 1) * c
    best_numeric, best_closed = 0.0, 0.0
    for x in np.atleast_2d(states):
        G = nl.G(x)
        GtW = G.T @ W
        closed, u_star = rho_closed_form(G, nl.R, beta)
        best_closed = max(best_closed, closed)

        def neg(u):
            return -scale * math.exp(-0.5 * beta * float(u @ W @ u)) * float(np.linalg.norm(GtW @ u))

        starts = [u_star] + ([] if seeds is None else [np.atleast_1d(s) for s in seeds])
        for u0 in starts:
            res = optimize.minimize(neg, u0, method="Nelder-Mead",
                                    options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
            best_numeric = max(best_numeric, -float(res.fun), -neg(u0))
    return best_numeric, best_closed


def z_grid(m, low=1.0, high=1e6, num=61, direction=None):
    """Contamination points ``s * d`` for geometric magnitudes ``s`` in ``[low, high]``."""
    d = np.ones(m) if direction is None else np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    return np.geomspace(low, high, num)[:, None] * d


@dataclass
class SensitivityReport:
    kind: str
    verdict: str
    bound: Optional[float]
    rho_max: Optional[float]
    rho_max_closed_form: Optional[float]
    m1_inverse_fro: float
    horizon: int
    empirical_sup: float
    peak_index: int
    tail_ratio: float
    growth_ratio: Optional[float]
    grid: List[List[float]] = field(default_factory=list)
    norms: List[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def gross_error_sensitivity(window, solution, model, beta=None, z_grid_points=None,
                            kind=None) -> SensitivityReport:
    """Scan the IF norm over a z-grid and compare it with the analytic bound.

    For the beta cost the bound is ``2 sqrt(T) |M1^-1|_F rho_max``. For the
    Gaussian cost no finite bound exists; the report instead carries the
    growth ratio ``|IF(z_max)| / |IF(z_max / 2)|``, which tends to 2 when
    the IF grows affinely in ``z``.
    """
    if kind is None:
        kind = Standard() if beta is None else Beta(beta)
    if z_grid_points is None:
        raise ValueError("a z-grid is required")
    grid = np.atleast_2d(np.asarray(z_grid_points, dtype=float))
    if grid.size == 0 or grid.shape[0] == 0:
        raise ValueError("z-grid is empty")
    nl = as_nonlinear(model)
    if grid.shape[1] != nl.m:
        grid = grid.T if grid.shape[0] == nl.m else grid
        if grid.shape[1] != nl.m:
            raise ValueError(f"z-grid points must have {nl.m} entries")

    results = [influence_function(window, solution, model, kind, z) for z in grid]
    norms = np.array([r.norm() for r in results])
    M1 = results[0].M1
    m1_inv_fro = float(np.linalg.norm(np.linalg.inv(M1), "fro"))
    T = window.length
    peak = int(np.argmax(norms))
    tail_ratio = float(norms[-1] / norms[peak]) if norms[peak] > 0 else 0.0
    half = influence_function(window, solution, model, kind, grid[-1] / 2).norm()
    growth = float(norms[-1] / half) if half > 0 else None

    if isinstance(kind, Beta):
        X = np.asarray(solution, dtype=float).reshape(T + 1, nl.n)
        seeds = [z - nl.g(X[-1]) for z in grid[:: max(1, len(grid) // 8)]]
        numeric, closed = rho_max(X, model, kind.beta, seeds)
        rmax = max(numeric, closed)
        bound = 2 * math.sqrt(T) * m1_inv_fro * rmax
        verdict = "bounded"
        return SensitivityReport(kind.label, verdict, bound, rmax, closed, m1_inv_fro, T,
                                 float(norms.max()), peak, tail_ratio, growth,
                                 grid.tolist(), norms.tolist())
    return SensitivityReport(kind.label, "unbounded", None, None, None, m1_inv_fro, T,
                             float(norms.max()), peak, tail_ratio, growth,
                             grid.tolist(), norms.tolist())


__all__ = [
    "InfluenceResult", "SensitivityReport", "influence_function", "empirical_influence",
    "gross_error_sensitivity", "rho_max", "rho_closed_form", "z_grid",
]
