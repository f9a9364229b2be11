"""System zoo, contamination mechanisms and the seeded trajectory simulator.

Models are immutable. A :class:`LinearGaussianModel` can be viewed as a
:class:`NonlinearModel` through :meth:`LinearGaussianModel.as_nonlinear`, so
every estimator in the package works against the nonlinear interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from typing import Callable, Optional, Sequence, Union

import numpy as np

from ._linalg import psd_sqrt, symmetrize
from .errors import DegenerateGeometryError, ModelValidationError, SimulationDivergedError

PSD_TOL = 1e-10


def _as_matrix(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ModelValidationError(f"{name} must be a matrix, got shape {M.shape}")
    return M


def _check_covariance(P, name, strict=False):
    P = _as_matrix(P, name)
    if P.shape[0] != P.shape[1]:
        raise ModelValidationError(f"{name} must be square, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        raise ModelValidationError(f"{name} has non-finite entries")
    if not np.allclose(P, P.T, atol=1e-10, rtol=1e-8):
        raise ModelValidationError(f"{name} is not symmetric")
    P = symmetrize(P)
    lam = np.linalg.eigvalsh(P).min() if P.size else 0.0
    if strict and lam <= 0.0:
        raise ModelValidationError(f"{name} is not positive definite (min eigenvalue {lam:.3g})")
    if lam < -PSD_TOL:
        raise ModelValidationError(f"{name} is not positive semi-definite (min eigenvalue {lam:.3g})")
    return P


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _check_covariance(self.covariance, "covariance")
        if cov.shape != (mean.size, mean.size):
            raise ModelValidationError(
                f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self):
        return self.mean.size


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    """Additive-noise state-space model ``x' = f(x, u) + w``, ``y = g(x) + v``.

    ``transition_jacobian`` and ``measurement_jacobian`` are optional; when
    missing, central differences with step ``1e-6 * max(1, |x_i|)`` are used.
    The second-derivative callables follow the same rule (differencing the
    Jacobians). ``residual`` lets a model wrap angular channels; it defaults
    to plain subtraction.
    """

    n: int
    m: int
    transition_mean: Callable
    measurement_mean: Callable
    Q: np.ndarray
    R: np.ndarray
    initial: GaussianDensity
    transition_jacobian: Optional[Callable] = None
    measurement_jacobian: Optional[Callable] = None
    transition_hessian: Optional[Callable] = None
    measurement_hessian: Optional[Callable] = None
    residual: Optional[Callable] = None
    name: str = "nonlinear"

    def __post_init__(self):
        Q = _check_covariance(self.Q, "Q")
        R = _check_covariance(self.R, "R")
        if Q.shape != (self.n, self.n):
            raise ModelValidationError(f"Q has shape {Q.shape}, expected {(self.n, self.n)}")
        if R.shape != (self.m, self.m):
            raise ModelValidationError(f"R has shape {R.shape}, expected {(self.m, self.m)}")
        if self.initial.dim != self.n:
            raise ModelValidationError("initial density dimension does not match n")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    def f(self, x, u=None):
        return np.asarray(self.transition_mean(x, u), dtype=float)

    def g(self, x):
        return np.atleast_1d(np.asarray(self.measurement_mean(x), dtype=float))

    def innovation(self, y, yhat):
        if self.residual is None:
            return y - yhat
        return self.residual(y, yhat)

    def F(self, x, u=None):
        if self.transition_jacobian is not None:
            return np.asarray(self.transition_jacobian(x, u), dtype=float)
        return fd_jacobian(lambda s: self.f(s, u), x)

    def G(self, x):
        if self.measurement_jacobian is not None:
            return np.atleast_2d(np.asarray(self.measurement_jacobian(x), dtype=float))
        return fd_jacobian(self.g, x)

    def F2(self, x, u=None):
        """Second derivatives of the transition mean, shape ``(n, n, n)``."""
        if self.transition_hessian is not None:
            return np.asarray(self.transition_hessian(x, u), dtype=float)
        return fd_jacobian(lambda s: self.F(s, u), x, step=1e-5)

    def G2(self, x):
        """Second derivatives of the measurement mean, shape ``(m, n, n)``."""
        if self.measurement_hessian is not None:
            return np.asarray(self.measurement_hessian(x), dtype=float)
        return fd_jacobian(self.G, x, step=1e-5)


def fd_jacobian(fun, x, step=1e-6):
    """Central-difference Jacobian of ``fun`` at ``x``.

    Works for vector- and matrix-valued ``fun``; the differentiation axis is
    appended last, so a map R^n -> R^{m x n} yields an ``(m, n, n)`` array.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(fun(xp), dtype=float) - np.asarray(fun(xm), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    initial: GaussianDensity
    name: str = "linear"

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        C = _as_matrix(self.C, "C")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ModelValidationError(f"A must be square, got {A.shape}")
        if C.shape[1] != n:
            raise ModelValidationError(f"C has {C.shape[1]} columns, expected {n}")
        Q = _check_covariance(self.Q, "Q")
        R = _check_covariance(self.R, "R")
        if Q.shape != (n, n) or R.shape != (C.shape[0], C.shape[0]):
            raise ModelValidationError("Q/R dimensions inconsistent with A/C")
        if self.initial.dim != n:
            raise ModelValidationError("initial density dimension does not match A")
        for k, v in dict(A=A, C=C, Q=Q, R=R).items():
            v.setflags(write=False)
            object.__setattr__(self, k, v)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.C.shape[0]

    def as_nonlinear(self):
        return self._nonlinear

    @cached_property
    def _nonlinear(self):
        A, C, n, m = self.A, self.C, self.n, self.m
        zf = np.zeros((n, n, n))
        zg = np.zeros((m, n, n))
        return NonlinearModel(
            n=n, m=m,
            transition_mean=lambda x, u=None: A @ x,
            measurement_mean=lambda x: C @ x,
            Q=self.Q, R=self.R, initial=self.initial,
            transition_jacobian=lambda x, u=None: A,
            measurement_jacobian=lambda x: C,
            transition_hessian=lambda x, u=None: zf,
            measurement_hessian=lambda x: zg,
            name=self.name,
        )


Model = Union[LinearGaussianModel, NonlinearModel]


def as_nonlinear(model: Model) -> NonlinearModel:
    return model.as_nonlinear() if isinstance(model, LinearGaussianModel) else model


# --------------------------------------------------------------------------
# contamination


@dataclass(frozen=True)
class GaussianOutlier:
    """Outlier noise replacing the nominal measurement noise."""
    mean: np.ndarray
    covariance: np.ndarray


@dataclass(frozen=True)
class StudentT:
    """Multivariate Student-t outlier noise with scale matrix ``scale``."""
    nu: float
    scale: np.ndarray


@dataclass(frozen=True)
class Saturation:
    """Sensor saturation: the listed channels read exactly ``value``."""
    value: float
    channels: Sequence[int]


@dataclass(frozen=True)
class ContaminationSpec:
    p_c: float = 0.0
    outlier: Union[GaussianOutlier, StudentT, Saturation, None] = None

    def __post_init__(self):
        if not 0.0 <= self.p_c <= 1.0:
            raise ModelValidationError(f"p_c must lie in [0, 1], got {self.p_c}")
        if self.p_c > 0 and self.outlier is None:
            raise ModelValidationError("p_c > 0 requires an outlier mechanism")
        o = self.outlier
        if isinstance(o, StudentT) and not o.nu >= 1:
            raise ModelValidationError(f"Student-t degrees of freedom must be >= 1, got {o.nu}")
        if isinstance(o, Saturation) and not np.isfinite(o.value):
            raise ModelValidationError("saturation value must be finite")

    def with_p_c(self, p_c):
        return ContaminationSpec(p_c, self.outlier)


NO_CONTAMINATION = ContaminationSpec()


# --------------------------------------------------------------------------
# simulation


def make_rng(seed):
    """Counter-based generator; the same seed always yields the same stream."""
    return np.random.Generator(np.random.Philox(int(seed)))


def trial_seed(base_seed, trial_index):
    return int(base_seed) ^ int(trial_index)


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    measurements: np.ndarray
    outlier_flags: np.ndarray
    seed: int
    controls: Optional[np.ndarray] = None

    @property
    def n_steps(self):
        return self.measurements.shape[0]

    def checksum(self):
        import hashlib
        h = hashlib.sha256(np.ascontiguousarray(self.measurements).tobytes())
        if self.controls is not None:
            h.update(np.ascontiguousarray(self.controls).tobytes())
        return h.hexdigest()


def _draw_outlier_noise(rng, outlier, n_steps, m):
    if isinstance(outlier, GaussianOutlier):
        mean = np.broadcast_to(np.asarray(outlier.mean, dtype=float), (m,))
        L = psd_sqrt(np.atleast_2d(outlier.covariance))
        return mean + rng.standard_normal((n_steps, m)) @ L.T
    if isinstance(outlier, StudentT):
        L = psd_sqrt(np.atleast_2d(outlier.scale))
        z = rng.standard_normal((n_steps, m)) @ L.T
        w = rng.chisquare(outlier.nu, size=n_steps) / outlier.nu
        return z / np.sqrt(w)[:, None]
    return None


def simulate_trajectory(model: Model, contamination: ContaminationSpec = NO_CONTAMINATION,
                        n_steps: int = 200, seed: int = 0, controls=None,
                        initial_state=None) -> Trajectory:
    """Sample a state/measurement sequence from ``model``.

    All random numbers are drawn up front from a Philox stream keyed by
    ``seed``. ``controls[k]`` drives the transition from ``x_k`` to
    ``x_{k+1}``. Passing ``initial_state`` skips the draw of ``x_0``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    nl = as_nonlinear(model)
    n, m = nl.n, nl.m
    if controls is not None:
        controls = np.asarray(controls, dtype=float)
        if controls.ndim == 1:
            controls = controls[:, None]
        if controls.shape[0] < n_steps:
            raise ValueError(f"need {n_steps} controls, got {controls.shape[0]}")
        controls = controls[:n_steps]

    rng = make_rng(seed)
    x0_noise = rng.standard_normal(n)
    w = rng.standard_normal((n_steps, n)) @ psd_sqrt(nl.Q).T
    v = rng.standard_normal((n_steps, m)) @ psd_sqrt(nl.R).T
    flags = rng.random(n_steps) < contamination.p_c
    outlier_noise = _draw_outlier_noise(rng, contamination.outlier, n_steps, m)

    if initial_state is None:
        x = nl.initial.mean + psd_sqrt(nl.initial.covariance) @ x0_noise
    else:
        x = np.asarray(initial_state, dtype=float).copy()
    states = np.empty((n_steps + 1, n))
    ys = np.empty((n_steps, m))
    states[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            u = None if controls is None else controls[k]
            x = nl.f(x, u) + w[k]
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError(k + 1)
            states[k + 1] = x
            noise = outlier_noise[k] if (flags[k] and outlier_noise is not None) else v[k]
            y = nl.g(x) + noise
            if flags[k] and isinstance(contamination.outlier, Saturation):
                y[list(contamination.outlier.channels)] = contamination.outlier.value
            ys[k] = y
    return Trajectory(states=states, measurements=ys, outlier_flags=flags, seed=int(seed),
                      controls=controls)


# --------------------------------------------------------------------------
# system zoo


def wiener_velocity_model(dt=0.1):
    """Planar constant-velocity model with unit position-measurement noise."""
    A = np.array([[1, 0, dt, 0],
                  [0, 1, 0, dt],
                  [0, 0, 1, 0],
                  [0, 0, 0, 1]], dtype=float)
    C = np.array([[1, 0, 0, 0],
                  [0, 1, 0, 0]], dtype=float)
    q3, q2 = dt ** 3 / 3, dt ** 2 / 2
    Q = np.array([[q3, 0, q2, 0],
                  [0, q3, 0, q2],
                  [q2, 0, dt, 0],
                  [0, q2, 0, dt]])
    R = np.eye(2)
    return LinearGaussianModel(A, C, Q, R, GaussianDensity(np.zeros(4), np.eye(4)), name="wiener")


def wiener_outliers():
    return GaussianOutlier(mean=np.zeros(2), covariance=100.0 ** 2 * np.eye(2))


def gas_reactor_model(k1=0.16, k2=0.0064, dt=0.1):
    """Euler-discretized isothermal reactor ``2A <-> B`` measured by total pressure."""

    def f(x, u=None):
        pa, pb = x
        return np.array([pa + (-2 * k1 * pa ** 2 + 2 * k2 * pb) * dt,
                         pb + (k1 * pa ** 2 - k2 * pb) * dt])

    def F(x, u=None):
        pa = x[0]
        return np.array([[1 - 4 * k1 * pa * dt, 2 * k2 * dt],
                         [2 * k1 * pa * dt, 1 - k2 * dt]])

    F2 = np.zeros((2, 2, 2))
    F2[0, 0, 0] = -4 * k1 * dt
    F2[1, 0, 0] = 2 * k1 * dt
    C = np.array([[1.0, 1.0]])
    G2 = np.zeros((1, 2, 2))

    return NonlinearModel(
        n=2, m=1,
        transition_mean=f,
        measurement_mean=lambda x: C @ x,
        Q=1e-4 * np.eye(2), R=np.array([[0.01]]),
        initial=GaussianDensity(np.zeros(2), np.eye(2)),
        transition_jacobian=F,
        measurement_jacobian=lambda x: C,
        transition_hessian=lambda x, u=None: F2,
        measurement_hessian=lambda x: G2,
        name="reactor",
    )


def reactor_outliers():
    return StudentT(nu=1.0, scale=np.array([[0.01]]))


def load_vehicle_fixture():
    text = resources.files("robust_mhe").joinpath("data/vehicle.json").read_text()
    return json.loads(text)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def vehicle_controls(fixture=None, n_steps=None):
    """Synthetic speed / yaw-rate profile, shape ``(n_steps, 2)``."""
    fx = fixture or load_vehicle_fixture()
    spec = fx["controls"]
    n_steps = n_steps or spec["n_steps"]
    t = np.arange(n_steps) * fx["dt"]

    def wave(p):
        return p["offset"] + p["amplitude"] * np.sin(2 * np.pi * t / p["period"] + p["phase"])

    return np.column_stack([wave(spec["speed"]), wave(spec["yaw_rate"])])


def landmark_clearance(fixture, states):
    """Smallest distance between the Lidar and any cone along ``states``."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    cones = np.asarray(fixture["cones"], dtype=float)
    l = float(fixture["lidar_offset"])
    sensor = states[:, :2] + l * np.column_stack([np.cos(states[:, 2]), np.sin(states[:, 2])])
    return float(np.min(np.linalg.norm(sensor[:, None, :] - cones[None], axis=2)))


def warehouse_vehicle_model(fixture=None):
    """Unicycle vehicle observing three landmarks by range and bearing.

    The identified noise means are folded into the transition and
    measurement maps, so ``Q`` and ``R`` describe zero-mean noise.
    """
    fx = fixture or load_vehicle_fixture()
    dt = float(fx["dt"])
    l = float(fx["lidar_offset"])
    cones = np.asarray(fx["cones"], dtype=float)
    k = cones.shape[0]
    mu_w = np.asarray(fx["process_noise"]["mean"], dtype=float)
    mu_v = np.asarray(fx["measurement_noise"]["mean"], dtype=float)

    def f(x, u):
        v, w = u
        th = x[2]
        return x + np.array([v * np.cos(th), v * np.sin(th), w]) * dt + mu_w

    def F(x, u):
        v = u[0]
        th = x[2]
        return np.array([[1, 0, -v * np.sin(th) * dt],
                         [0, 1, v * np.cos(th) * dt],
                         [0, 0, 1]], dtype=float)

    def offsets(x):
        px, py, th = x
        dx = cones[:, 0] - px - l * np.cos(th)
        dy = cones[:, 1] - py - l * np.sin(th)
        d2 = dx ** 2 + dy ** 2
        if np.any(d2 < 1e-18):
            raise DegenerateGeometryError("sensor coincides with a landmark; bearing undefined")
        return dx, dy, d2

    def g(x):
        dx, dy, d2 = offsets(x)
        bearing = wrap_angle(np.arctan2(dy, dx) - x[2])
        return np.concatenate([np.sqrt(d2), bearing]) + mu_v

    def G(x):
        th = x[2]
        dx, dy, d2 = offsets(x)
        d = np.sqrt(d2)
        s, c = l * np.sin(th), l * np.cos(th)
        J = np.empty((2 * k, 3))
        J[:k, 0] = -dx / d
        J[:k, 1] = -dy / d
        J[:k, 2] = (dx * s - dy * c) / d
        J[k:, 0] = dy / d2
        J[k:, 1] = -dx / d2
        J[k:, 2] = (-dx * c - dy * s) / d2 - 1.0
        return J

    def residual(y, yhat):
        r = np.asarray(y, dtype=float) - yhat
        r[..., k:] = wrap_angle(r[..., k:])
        return r

    return NonlinearModel(
        n=3, m=2 * k,
        transition_mean=f,
        measurement_mean=g,
        Q=np.diag(fx["process_noise"]["variance"]),
        R=np.diag(fx["measurement_noise"]["variance"]),
        initial=GaussianDensity(np.asarray(fx["initial"]["mean"], dtype=float),
                                np.diag(fx["initial"]["variance"])),
        transition_jacobian=F,
        measurement_jacobian=G,
        residual=residual,
        name="vehicle",
    )


def vehicle_outliers(fixture=None):
    fx = fixture or load_vehicle_fixture()
    sat = fx["saturation"]
    return Saturation(value=float(sat["value"]), channels=tuple(sat["channels"]))
