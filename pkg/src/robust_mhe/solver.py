"""Damped Newton / Levenberg-Marquardt minimizer for small dense problems."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import linalg

from ._linalg import JITTER

EPS = np.finfo(float).eps
MAX_DAMPING = 1e16
# relative slack within which two objective values count as equal; window
# objectives add terms whose residuals cancel O(1) states, which costs a few
# dozen ulps in f
TIE = 64 * EPS


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-12
    initial_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.gradient_tolerance <= 0 or self.step_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.initial_damping < 0 or self.damping_increase <= 1 or not 0 < self.damping_decrease < 1:
            raise ValueError("invalid damping schedule")


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    STALLED = "Stalled"


@dataclass
class SolveReport:
    status: Status
    iterations: int
    objective: float
    gradient_norm: float
    history: List[float] = field(default_factory=list)

    @property
    def converged(self):
        return self.status is Status.CONVERGED


def _damped_solve(B, damping, g):
    """Solve ``(B + damping * I) dx = -g``.

    Identity damping rather than Marquardt's ``diag(B)``: horizon Hessians
    have strongly coupled blocks whose diagonal overstates the smallest
    curvature by orders of magnitude. Returns ``None`` when the damped matrix
    is not positive definite, which the caller treats as a rejected step.
    """
    M = B + damping * np.eye(len(g))
    try:
        L = linalg.cholesky(M, lower=True, check_finite=False)
    except linalg.LinAlgError:
        try:
            L = linalg.cholesky(M + JITTER * np.eye(len(g)), lower=True, check_finite=False)
        except linalg.LinAlgError:
            return None
    return -linalg.cho_solve((L, True), g, check_finite=False)


def minimize(f: Callable, grad: Callable, x0, config: SolverConfig = SolverConfig(),
             hess_approx: Optional[Callable] = None):
    """Minimize a smooth function.

    With ``hess_approx`` each step solves the damped Newton system built from
    the supplied curvature matrix; otherwise a BFGS approximation is
    maintained. A step is accepted if it lowers ``f``; when ``f`` changes by
    less than its floating-point resolution the step is accepted only if it
    halves the gradient norm. Convergence is declared when the gradient norm
    drops below ``gradient_tolerance`` or an accepted step is shorter than
    ``step_tolerance``. When a
    curvature matrix is supplied, a converged run finishes with a few undamped
    Newton steps (each kept only if it reduces the gradient norm
    without raising ``f`` beyond rounding); the same steps are tried before
    giving up when the damping grows without bound.

    Returns ``(x, SolveReport)``.
    """
    x = np.array(x0, dtype=float)
    fx = float(f(x))
    g = np.asarray(grad(x), dtype=float)
    if not np.isfinite(fx) or not np.all(np.isfinite(g)):
        raise ValueError("objective or gradient is not finite at the starting point")
    history = [fx]
    gnorm = float(np.linalg.norm(g))
    if gnorm < config.gradient_tolerance:
        return x, SolveReport(Status.CONVERGED, 0, fx, gnorm, history)

    B = np.asarray(hess_approx(x), dtype=float) if hess_approx else np.eye(x.size)
    damping = config.initial_damping
    status = Status.MAX_ITERATIONS
    it = 0
    while it < config.max_iterations:
        it += 1
        dx = _damped_solve(B, damping, g)
        if dx is None:
            damping = max(damping, 1e-12) * config.damping_increase
            if damping > MAX_DAMPING:
                status = Status.STALLED
                if hess_approx:
                    x, fx, g, gnorm, status = _rescue(f, grad, hess_approx, x, fx, g, B, history, config)
                break
            continue
        x_new = x + dx
        with np.errstate(all="ignore"):
            f_new = float(f(x_new))
        accept = np.isfinite(f_new) and f_new < fx
        g_new = None
        if not accept and np.isfinite(f_new) and f_new - fx <= TIE * max(abs(fx), 1.0):
            # rounding tie: f cannot resolve the step, let the gradient decide
            g_new = np.asarray(grad(x_new), dtype=float)
            accept = bool(np.all(np.isfinite(g_new))) and np.linalg.norm(g_new) < 0.5 * gnorm
        if accept:
            if g_new is None:
                g_new = np.asarray(grad(x_new), dtype=float)
            if not np.all(np.isfinite(g_new)):
                status = Status.STALLED
                break
            if hess_approx:
                B = np.asarray(hess_approx(x_new), dtype=float)
            else:
                B = _bfgs_update(B, dx, g_new - g, first=(len(history) == 1))
            x, fx, g = x_new, f_new, g_new
            history.append(fx)
            gnorm = float(np.linalg.norm(g))
            damping *= config.damping_decrease
            if gnorm < config.gradient_tolerance or np.linalg.norm(dx) < config.step_tolerance:
                status = Status.CONVERGED
                if hess_approx:
                    x, fx, g = _polish_loop(f, grad, hess_approx, x, fx, g, B, history)
                    gnorm = float(np.linalg.norm(g))
                break
        else:
            damping = max(damping, 1e-12) * config.damping_increase
            if damping > MAX_DAMPING:
                status = Status.STALLED
                if hess_approx:
                    x, fx, g, gnorm, status = _rescue(f, grad, hess_approx, x, fx, g, B, history, config)
                break
    return x, SolveReport(status, it, fx, gnorm, history)


def _polish_loop(f, grad, hess, x, fx, g, B, history, tol=0.0, steps=5):
    # undamped Newton steps, each kept only if it lowers the gradient norm
    for _ in range(steps):
        if np.linalg.norm(g) <= tol:
            break
        x_new, f_new, g_new = _polish(f, grad, x, fx, g, B, history)
        if x_new is x:
            break
        x, fx, g = x_new, f_new, g_new
        B = np.asarray(hess(x), dtype=float)
    return x, fx, g


def _rescue(f, grad, hess, x, fx, g, B, history, config):
    # damping blew up near the optimum, where f can no longer rank steps;
    # plain Newton steps judged by the gradient often still finish the job
    x, fx, g = _polish_loop(f, grad, hess, x, fx, g, B, history, tol=config.gradient_tolerance)
    gnorm = float(np.linalg.norm(g))
    status = Status.CONVERGED if gnorm < config.gradient_tolerance else Status.STALLED
    return x, fx, g, gnorm, status


def _polish(f, grad, x, fx, g, B, history):
    # one undamped step removes the bias left by the damping term
    dx = _damped_solve(B, 0.0, g)
    if dx is None:
        return x, fx, g
    with np.errstate(all="ignore"):
        f_new = float(f(x + dx))
    if np.isfinite(f_new) and f_new - fx <= TIE * max(abs(fx), 1.0):
        g_new = np.asarray(grad(x + dx), dtype=float)
        if np.all(np.isfinite(g_new)) and np.linalg.norm(g_new) < np.linalg.norm(g):
            history.append(f_new)
            return x + dx, f_new, g_new
    return x, fx, g


def _bfgs_update(B, s, y, first=False):
    sy = s @ y
    if sy <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
        return B
    if first:
        B = np.eye(len(s)) * (y @ y) / sy
    Bs = B @ s
    return B - np.outer(Bs, Bs) / (s @ Bs) + np.outer(y, y) / sy


def finite_difference_gradient(f: Callable, x, step=1e-6):
    """Central-difference gradient with a fixed absolute ``step``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        out[i] = (f(x + e) - f(x - e)) / (2 * step)
    return out


def finite_difference_hessian(grad: Callable, x, step=1e-5):
    """Symmetrized central-difference Jacobian of ``grad``."""
    x = np.asarray(x, dtype=float)
    H = np.empty((x.size, x.size))
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        H[:, i] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2 * step)
    return 0.5 * (H + H.T)
