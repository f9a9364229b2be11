"""Kalman-type filters and the Riccati covariance recursion.

The filters serve two roles: experiment baselines, and propagation of the
arrival-cost covariance inside the moving-horizon estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._linalg import cholesky, spd_solve, symmetrize
from .models import GaussianDensity, LinearGaussianModel, as_nonlinear


@dataclass(frozen=True)
class FilterState:
    posterior: GaussianDensity
    step: int = 0

    @property
    def mean(self):
        return self.posterior.mean

    @property
    def covariance(self):
        return self.posterior.covariance


@dataclass(frozen=True)
class UkfParams:
    alpha: float = 1e-3
    beta_ut: float = 2.0
    kappa: float = 0.0

    def lam(self, n):
        return self.alpha ** 2 * (n + self.kappa) - n


def _update(xp, Pp, H, innovation, R, step):
    # Joseph form keeps the posterior PSD
    S = H @ Pp @ H.T + R
    K = spd_solve(S, H @ Pp, "innovation covariance").T
    mean = xp + K @ innovation
    IKH = np.eye(xp.size) - K @ H
    P = IKH @ Pp @ IKH.T + K @ R @ K.T
    return FilterState(GaussianDensity(mean, symmetrize(P)), step)


def kf_step(model: LinearGaussianModel, prior: FilterState, y) -> FilterState:
    """One predict-then-update cycle of the Kalman filter."""
    A, C = model.A, model.C
    xp = A @ prior.mean
    Pp = A @ prior.covariance @ A.T + model.Q
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _update(xp, Pp, C, y - C @ xp, model.R, prior.step + 1)


def riccati_step(model: LinearGaussianModel, P):
    """``Q + A P A' - A P C' (R + C P C')^{-1} C P A'``."""
    A, C = model.A, model.C
    P = np.asarray(P, dtype=float)
    S = model.R + C @ P @ C.T
    APC = A @ P @ C.T
    out = model.Q + A @ P @ A.T - APC @ spd_solve(S, APC.T, "R + C P C'")
    return symmetrize(out)


def riccati_fixed_point(model, P0=None, tol=1e-10, max_iter=500):
    """Iterate :func:`riccati_step` until the Frobenius change drops below ``tol``.

    Returns ``(P, iterations)``; raises ``RuntimeError`` if ``max_iter`` is hit.
    """
    P = np.eye(model.n) if P0 is None else np.asarray(P0, dtype=float)
    for i in range(1, max_iter + 1):
        Pn = riccati_step(model, P)
        if np.linalg.norm(Pn - P, "fro") < tol:
            return Pn, i
        P = Pn
    raise RuntimeError(f"Riccati iteration did not converge in {max_iter} iterations")


def ekf_covariance_step(model, state: FilterState, y, u=None) -> FilterState:
    """Extended Kalman filter step linearized at the current mean."""
    nl = as_nonlinear(model)
    x = state.mean
    Fx = nl.F(x, u)
    xp = nl.f(x, u)
    Pp = Fx @ state.covariance @ Fx.T + nl.Q
    H = nl.G(xp)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    return _update(xp, Pp, H, nl.innovation(y, nl.g(xp)), nl.R, state.step + 1)


def ut_weights(n, params: UkfParams):
    lam = params.lam(n)
    c = n + lam
    if c <= 0:
        raise ValueError(f"n + lambda must be positive, got {c}")
    # trim the outer weight's mantissa so that 2n * w and 1 - 2n * w are exact;
    # the weights then sum to one exactly even when the centre weight is ~ -1e6
    mant, exp = math.frexp(0.5 / c)
    bits = 52 - (2 * n).bit_length()
    w = math.ldexp(round(mant * 2.0 ** bits) / 2.0 ** bits, exp)
    wm = np.full(2 * n + 1, w)
    wc = wm.copy()
    wm[0] = 1.0 - 2 * n * w
    wc[0] = wm[0] + (1 - params.alpha ** 2 + params.beta_ut)
    return wm, wc, c


def _weighted_mean(wm, Z):
    # offsets from the centre point avoid cancellation against the large wm[0]
    return Z[0] + wm[1:] @ (Z[1:] - Z[0])


def sigma_points(mean, P, c):
    L = cholesky(c * P, "sigma-point covariance")
    return np.vstack([mean, mean + L.T, mean - L.T])


def ukf_step(model, state: FilterState, y, params: UkfParams = UkfParams(), u=None) -> FilterState:
    """Unscented Kalman filter step with additive process and measurement noise."""
    nl = as_nonlinear(model)
    n = nl.n
    wm, wc, c = ut_weights(n, params)

    X = sigma_points(state.mean, state.covariance, c)
    Xf = np.array([nl.f(s, u) for s in X])
    xp = _weighted_mean(wm, Xf)
    dX = Xf - xp
    Pp = symmetrize((dX.T * wc) @ dX + nl.Q)

    Xs = sigma_points(xp, Pp, c)
    Ys = np.array([nl.g(s) for s in Xs])
    yhat = _weighted_mean(wm, Ys)
    dY = np.array([nl.innovation(yi, yhat) for yi in Ys])
    dXs = Xs - xp
    S = symmetrize((dY.T * wc) @ dY + nl.R)
    Pxy = (dXs.T * wc) @ dY
    K = spd_solve(S, Pxy.T, "innovation covariance").T
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mean = xp + K @ nl.innovation(y, yhat)
    P = symmetrize(Pp - K @ S @ K.T)
    return FilterState(GaussianDensity(mean, P), state.step + 1)


def filter_step(kind, model, state, y, u=None, params: UkfParams = UkfParams()):
    kind = kind.lower()
    if kind == "kf":
        if not isinstance(model, LinearGaussianModel):
            raise TypeError("the KF requires a LinearGaussianModel")
        return kf_step(model, state, y)
    if kind == "ekf":
        return ekf_covariance_step(model, state, y, u)
    if kind == "ukf":
        return ukf_step(model, state, y, params, u)
    raise ValueError(f"unknown filter {kind!r}")


def run_filter(kind, model, measurements, controls=None, prior=None, params=UkfParams()):
    """Run a filter over a measurement sequence.

    Returns ``(means, covariances)`` with one row per measurement.
    """
    prior = prior or model.initial
    state = FilterState(prior, 0)
    means, covs = [], []
    for k, y in enumerate(measurements):
        u = None if controls is None else controls[k]
        state = filter_step(kind, model, state, y, u, params)
        means.append(state.mean)
        covs.append(state.covariance)
    return np.array(means), np.array(covs)


__all__ = [
    "FilterState", "UkfParams", "kf_step", "riccati_step", "riccati_fixed_point",
    "ekf_covariance_step", "ukf_step", "filter_step", "run_filter", "ut_weights", "sigma_points",
]
