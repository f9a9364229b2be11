"""Moving horizon estimation with Gaussian or beta-divergence measurement costs.

The window objective over ``X = (x_s, ..., x_t)`` is

    J(X) = 1/2 |x_s - anchor|^2_{P^-1}
           + sum_i [ 1/2 |x_i - f(x_{i-1})|^2_{Q^-1} + log-normalizer ]
           + sum_i h(y_i, x_i)

with ``h`` either the Gaussian negative log-likelihood or the beta loss

    h_beta = -(beta+1)/beta * g(y|x)^beta + integral of g(.|x)^(beta+1).

The solver works on a constant-free version of ``J`` (the beta loss carries
an additive constant of order ``1/beta``, which would otherwise swamp the
objective's floating-point resolution); :func:`objective` adds the
constants back.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from ._linalg import logdet_spd, spd_inverse
from .errors import EstimateFailedError
from .filters import FilterState, filter_step
from .models import GaussianDensity, LinearGaussianModel, as_nonlinear
from .solver import SolverConfig, Status, minimize

LOG2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class Standard:
    """Gaussian negative log-likelihood stage cost."""

    @property
    def label(self):
        return "standard"


@dataclass(frozen=True)
class Beta:
    """Beta-divergence stage cost with robustness parameter ``beta`` in (0, 1)."""
    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    @property
    def label(self):
        return f"beta={self.beta:g}"


StageCostKind = Union[Standard, Beta]


@dataclass(frozen=True)
class MheConfig:
    horizon: int = 1
    stage_cost: StageCostKind = Standard()
    solver: SolverConfig = SolverConfig()
    arrival_filter: str = "ekf"
    warm_start: bool = True
    hessian: str = "exact"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.arrival_filter not in ("kf", "ekf", "ukf"):
            raise ValueError(f"unknown arrival filter {self.arrival_filter!r}")
        if self.hessian not in ("exact", "gauss_newton"):
            raise ValueError(f"unknown hessian mode {self.hessian!r}")


@dataclass(frozen=True, eq=False)
class HorizonWindow:
    """Anchor estimate, its covariance, and the measurements ``y_{s+1..t}``.

    ``controls[i]`` drives the transition into the ``i+1``-th window state.
    """
    anchor_mean: np.ndarray
    anchor_cov: np.ndarray
    measurements: np.ndarray
    t: int
    controls: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "anchor_mean", np.atleast_1d(np.asarray(self.anchor_mean, dtype=float)))
        object.__setattr__(self, "anchor_cov", np.atleast_2d(np.asarray(self.anchor_cov, dtype=float)))
        ys = np.asarray(self.measurements, dtype=float)
        if ys.ndim == 1:
            ys = ys[:, None]
        object.__setattr__(self, "measurements", ys)
        if self.controls is not None and len(self.controls) != len(ys):
            raise ValueError("controls and measurements differ in length")

    @property
    def length(self):
        """Number of measurements (effective horizon)."""
        return self.measurements.shape[0]

    def control(self, i):
        return None if self.controls is None else self.controls[i]


# --------------------------------------------------------------------------
# stage costs


def _beta_constants(beta, m, logdetR):
    # c = ((2 pi)^m |R|)^(-beta/2)
    c = math.exp(-0.5 * beta * (m * LOG2PI + logdetR))
    scale = (beta + 1) / beta * c
    integral = c / math.sqrt(beta + 1)
    return scale, integral


def beta_loss(y, x, model, beta):
    """Beta loss of measurement ``y`` at state ``x`` for a Gaussian likelihood."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    nl = as_nonlinear(model)
    r = nl.innovation(np.atleast_1d(np.asarray(y, dtype=float)), nl.g(x))
    q = float(r @ spd_inverse(nl.R, "R") @ r)
    scale, integral = _beta_constants(beta, nl.m, logdet_spd(nl.R, "R"))
    return -scale * math.exp(-0.5 * beta * q) + integral


def stage_cost_h(y, x, model, kind: StageCostKind):
    """Measurement stage cost; the Gaussian version keeps its log-normalizer."""
    if isinstance(kind, Beta):
        return beta_loss(y, x, model, kind.beta)
    nl = as_nonlinear(model)
    r = nl.innovation(np.atleast_1d(np.asarray(y, dtype=float)), nl.g(x))
    q = float(r @ spd_inverse(nl.R, "R") @ r)
    return 0.5 * q + 0.5 * (nl.m * LOG2PI + logdet_spd(nl.R, "R"))


class _MeasurementCost:
    """Constant-free measurement cost as a function of the weighted residual.

    ``value(q)`` is ``h - h(0)`` for ``q = r' W r``; ``slope(q)`` and
    ``curvature`` give the derivatives needed for gradients and Hessians.
    """

    def __init__(self, kind, m, W, logdetR):
        self.W = W
        self.beta = kind.beta if isinstance(kind, Beta) else None
        if self.beta is None:
            self.constant = 0.5 * (m * LOG2PI + logdetR)
        else:
            self.scale, integral = _beta_constants(self.beta, m, logdetR)
            self.constant = integral - self.scale

    def value(self, q):
        if self.beta is None:
            return 0.5 * q
        return -self.scale * math.expm1(-0.5 * self.beta * q)

    def weight(self, q):
        """dh/dq * 2, so that dh/dr = weight * W r."""
        if self.beta is None:
            return 1.0
        return self.scale * self.beta * math.exp(-0.5 * self.beta * q)

    def terms(self, r, wt, gauss_newton):
        """Gradient and Hessian of h with respect to the residual ``r``."""
        Wr = self.W @ r
        grad = wt * Wr
        if self.beta is None or gauss_newton:
            return grad, wt * self.W
        return grad, wt * (self.W - self.beta * np.outer(Wr, Wr))


class _WindowProblem:
    """Objective, gradient and Hessian for one horizon window.

    ``contamination`` is an optional ``(z, eps)`` pair; each measurement cost
    is then replaced by ``(1 - eps) h(y_i) + eps h(z_i)``.
    """

    def __init__(self, window, model, kind, contamination=None, hessian="exact"):
        nl = as_nonlinear(model)
        self.nl = nl
        self.window = window
        self.n = nl.n
        self.T = window.length
        if window.measurements.shape[1] != nl.m:
            raise ValueError(f"measurements have {window.measurements.shape[1]} channels, model has {nl.m}")
        if window.anchor_mean.size != nl.n or window.anchor_cov.shape != (nl.n, nl.n):
            raise ValueError("anchor dimensions do not match the model")
        self.Pinv = spd_inverse(window.anchor_cov, "anchor covariance")
        self.Qinv = spd_inverse(nl.Q, "Q")
        W = spd_inverse(nl.R, "R")
        logdetR = logdet_spd(nl.R, "R")
        self.meas = _MeasurementCost(kind, nl.m, W, logdetR)
        self.process_constant = 0.5 * (nl.n * LOG2PI + logdet_spd(nl.Q, "Q"))
        self.gauss_newton = hessian == "gauss_newton"
        self.targets = [(window.measurements, 1.0)]
        if contamination is not None:
            z, eps = contamination
            z = np.broadcast_to(np.asarray(z, dtype=float), window.measurements.shape)
            self.targets = [(window.measurements, 1.0 - eps), (z, eps)]

    @property
    def constant(self):
        return self.T * (self.process_constant + self.meas.constant)

    def unstack(self, X):
        X = np.asarray(X, dtype=float)
        return X.reshape(self.T + 1, self.n)

    def value(self, X):
        X = self.unstack(X)
        nl, w = self.nl, self.window
        e0 = X[0] - w.anchor_mean
        J = 0.5 * e0 @ self.Pinv @ e0
        for i in range(1, self.T + 1):
            d = X[i] - nl.f(X[i - 1], w.control(i - 1))
            J += 0.5 * d @ self.Qinv @ d
            gx = nl.g(X[i])
            for ys, wgt in self.targets:
                r = nl.innovation(ys[i - 1], gx)
                J += wgt * self.meas.value(float(r @ self.meas.W @ r))
        return float(J)

    def full_value(self, X):
        return self.value(X) + self.constant

    def derivatives(self, X, need_hessian=True, exact=None):
        """Gradient (and Hessian) of the objective at the stacked ``X``."""
        exact = (not self.gauss_newton) if exact is None else exact
        X = self.unstack(X)
        nl, w, n = self.nl, self.window, self.n
        N = (self.T + 1) * n
        g = np.zeros(N)
        H = np.zeros((N, N)) if need_hessian else None
        e0 = X[0] - w.anchor_mean
        g[:n] = self.Pinv @ e0
        if need_hessian:
            H[:n, :n] += self.Pinv
        for i in range(1, self.T + 1):
            a, b = slice((i - 1) * n, i * n), slice(i * n, (i + 1) * n)
            u = w.control(i - 1)
            d = X[i] - nl.f(X[i - 1], u)
            Fx = nl.F(X[i - 1], u)
            Qd = self.Qinv @ d
            g[b] += Qd
            g[a] -= Fx.T @ Qd
            if need_hessian:
                QF = self.Qinv @ Fx
                H[b, b] += self.Qinv
                H[b, a] -= QF
                H[a, b] -= QF.T
                H[a, a] += Fx.T @ QF
                if exact:
                    H[a, a] -= np.einsum("k,kij->ij", Qd, nl.F2(X[i - 1], u))
            gx = nl.g(X[i])
            Gx = nl.G(X[i])
            for ys, wgt in self.targets:
                r = nl.innovation(ys[i - 1], gx)
                q = float(r @ self.meas.W @ r)
                dr, d2r = self.meas.terms(r, self.meas.weight(q), not exact)
                g[b] -= wgt * (Gx.T @ dr)
                if need_hessian:
                    H[b, b] += wgt * (Gx.T @ d2r @ Gx)
                    if exact:
                        H[b, b] -= wgt * np.einsum("k,kij->ij", dr, nl.G2(X[i]))
        if need_hessian:
            H = 0.5 * (H + H.T)
        return g, H

    def gradient(self, X):
        return self.derivatives(X, need_hessian=False)[0]

    def hessian(self, X):
        return self.derivatives(X)[1]


def _check_candidate(problem, candidate):
    c = np.asarray(candidate, dtype=float)
    if c.size != (problem.T + 1) * problem.n:
        raise ValueError(
            f"candidate has {c.size} entries, expected {(problem.T + 1)} states of dimension {problem.n}")
    return c.reshape(-1)


def objective(window, candidate, model, kind: StageCostKind = Standard()):
    """Window objective including every additive constant."""
    p = _WindowProblem(window, model, kind)
    return p.full_value(_check_candidate(p, candidate))


def objective_gradient(window, candidate, model, kind: StageCostKind = Standard()):
    """Analytic gradient over the stacked trajectory, shape ``((T+1) * n,)``."""
    p = _WindowProblem(window, model, kind)
    return p.gradient(_check_candidate(p, candidate))


def objective_hessian(window, candidate, model, kind: StageCostKind = Standard()):
    """Exact Hessian over the stacked trajectory.

    Map curvature comes from the model's second-derivative callables, or
    from differenced Jacobians when those are absent.
    """
    p = _WindowProblem(window, model, kind)
    return p.derivatives(_check_candidate(p, candidate), exact=True)[1]


# --------------------------------------------------------------------------
# solving


@dataclass
class StepDiagnostics:
    status: Status
    iterations: int
    gradient_norm: float
    wall_time: float
    objective_history: List[float] = field(default_factory=list)
    cold_restart: bool = False


def cold_start(window):
    return np.tile(window.anchor_mean, (window.length + 1, 1))


def solve_window(window, model, kind, solver=SolverConfig(), initial=None, hessian="exact",
                 contamination=None):
    """Minimize the window objective; returns ``(X, SolveReport)`` with ``X`` unstacked."""
    p = _WindowProblem(window, model, kind, contamination, hessian)
    x0 = cold_start(window) if initial is None else np.asarray(initial, dtype=float)
    x0 = _check_candidate(p, x0)
    X, report = minimize(p.value, p.gradient, x0, solver, hess_approx=p.hessian)
    return p.unstack(X), report


def mhe_step(window: HorizonWindow, model, config: MheConfig = MheConfig(), initial=None):
    """Solve one window. Returns ``(x_hat, smoothed, diagnostics)``.

    A non-converged warm-started solve is retried once from a cold start;
    if that also fails, :class:`EstimateFailedError` carries the best
    iterate.
    """
    tic = time.perf_counter()
    kind = config.stage_cost
    X, report = solve_window(window, model, kind, config.solver, initial, config.hessian)
    retried = False
    if not report.converged:
        retried = True
        X2, report2 = solve_window(window, model, kind, config.solver, None, config.hessian)
        if report2.converged or report2.objective < report.objective:
            X, report = X2, report2
    wall = time.perf_counter() - tic
    diag = StepDiagnostics(report.status, report.iterations, report.gradient_norm, wall,
                           report.history, retried)
    if not report.converged:
        raise EstimateFailedError(
            f"window solve at t={window.t} ended with status {report.status.value}",
            best=X, report=report, step=window.t)
    return X[-1].copy(), X, diag


@dataclass
class EstimateTrace:
    times: np.ndarray
    estimates: np.ndarray
    smoothed: List[np.ndarray]
    diagnostics: List[StepDiagnostics]
    windows: List[HorizonWindow]
    step_times: np.ndarray

    def __len__(self):
        return len(self.times)


def _shift_warm_start(previous, prev_start, new_start, model, control):
    X = previous[new_start - prev_start:]
    return np.vstack([X, model.f(previous[-1], control)])


def run_estimator(model, measurements, config: MheConfig = MheConfig(), controls=None,
                  prior: Optional[GaussianDensity] = None) -> EstimateTrace:
    """Run moving horizon estimation over a measurement stream.

    For ``t < T`` the horizon shrinks to ``t`` and is anchored at the prior.
    Later windows are anchored at the estimator's own ``x_{t-T|t-T}`` with a
    covariance propagated by the configured filter, linearized along the
    estimator's trajectory.
    """
    nl = as_nonlinear(model)
    ys = np.asarray(measurements, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    N = ys.shape[0]
    prior = prior or nl.initial
    filter_model = model if config.arrival_filter == "kf" else nl
    if config.arrival_filter == "kf" and not isinstance(model, LinearGaussianModel):
        raise TypeError("arrival_filter='kf' requires a LinearGaussianModel")
    T = config.horizon

    xhat = [prior.mean.copy()]
    covs = [prior.covariance.copy()]
    estimates = np.empty((N, nl.n))
    smoothed, diags, windows = [], [], []
    step_times = np.empty(N)
    prev, prev_start = None, 0
    for t in range(1, N + 1):
        tic = time.perf_counter()
        s = max(0, t - T)
        window = HorizonWindow(xhat[s], covs[s], ys[s:t], t,
                               None if controls is None else controls[s:t])
        guess = None
        if config.warm_start and prev is not None:
            guess = _shift_warm_start(prev, prev_start, s, nl, window.control(window.length - 1))
        try:
            x, X, diag = mhe_step(window, model, config, guess)
        except EstimateFailedError as exc:
            exc.step = t
            raise
        xhat.append(x)
        u = None if controls is None else controls[t - 1]
        state = filter_step(config.arrival_filter, filter_model,
                            FilterState(GaussianDensity(xhat[t - 1], covs[t - 1]), t - 1), ys[t - 1], u)
        covs.append(state.covariance)
        estimates[t - 1] = x
        smoothed.append(X)
        diags.append(diag)
        windows.append(window)
        prev, prev_start = X, s
        step_times[t - 1] = time.perf_counter() - tic
    return EstimateTrace(np.arange(1, N + 1), estimates, smoothed, diags, windows, step_times)


__all__ = [
    "Standard", "Beta", "StageCostKind", "MheConfig", "HorizonWindow", "EstimateTrace",
    "StepDiagnostics", "beta_loss", "stage_cost_h", "objective", "objective_gradient",
    "objective_hessian", "solve_window", "mhe_step", "run_estimator", "cold_start",
]
