"""Monte-Carlo experiment harness: trials, RMSE, timing, sweeps and export."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .errors import SimulationDivergedError
from .filters import run_filter
from .mhe import Beta, MheConfig, Standard, run_estimator
from .models import (ContaminationSpec, GaussianOutlier, LinearGaussianModel, Saturation, StudentT,
                     gas_reactor_model, landmark_clearance, load_vehicle_fixture, reactor_outliers,
                     simulate_trajectory,
                     trial_seed, vehicle_controls, vehicle_outliers, warehouse_vehicle_model,
                     wiener_outliers, wiener_velocity_model)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_BETA_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
DEFAULT_PC_GRID = (0.0, 0.1, 0.2, 0.3)
# simulations of an unstable system may blow up; such draws are replaced
MAX_SIMULATION_ATTEMPTS = 50
CSV_COLUMNS = ("estimator", "trial", "rmse", "mean_step_ms", "status")


class ConfigError(ValueError):
    """Experiment configuration failed validation."""


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    kind: str  # kf | ekf | ukf | mhe
    mhe: Optional[MheConfig] = None

    def __post_init__(self):
        if self.kind not in ("kf", "ekf", "ukf", "mhe"):
            raise ConfigError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "mhe" and self.mhe is None:
            raise ConfigError(f"estimator {self.name!r} needs an MheConfig")


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    estimators: Tuple[EstimatorSpec, ...]
    contamination: ContaminationSpec = ContaminationSpec()
    n_trials: int = 30
    n_steps: int = 200
    base_seed: int = 0
    beta_grid: Tuple[float, ...] = DEFAULT_BETA_GRID
    pc_grid: Tuple[float, ...] = DEFAULT_PC_GRID
    name: str = ""
    record_state_errors: bool = False

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {sorted(MODELS)}")
        if self.n_trials < 1 or self.n_steps < 1:
            raise ConfigError("n_trials and n_steps must be >= 1")
        names = [e.name for e in self.estimators]
        if not names:
            raise ConfigError("at least one estimator is required")
        if len(set(names)) != len(names):
            raise ConfigError(f"estimator names must be unique, got {names}")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        object.__setattr__(self, "pc_grid", tuple(float(p) for p in self.pc_grid))


def _wiener():
    return wiener_velocity_model(), wiener_outliers(), None


def _reactor():
    return gas_reactor_model(), reactor_outliers(), None


def _vehicle():
    fx = load_vehicle_fixture()
    return warehouse_vehicle_model(fx), vehicle_outliers(fx), fx


MODELS = {"wiener": _wiener, "reactor": _reactor, "vehicle": _vehicle}


def build_model(name, n_steps=None):
    """Return ``(model, default_outlier, controls)`` for a model selector."""
    model, outlier, fx = MODELS[name]()
    controls = None if fx is None else vehicle_controls(fx, n_steps)
    return model, outlier, controls


def load_schema():
    text = resources.files("robust_mhe").joinpath("configs/experiment.schema.json").read_text()
    return json.loads(text)


def _outlier_from_dict(d, default):
    kind = d.get("type", "default")
    if kind == "default":
        return default
    if kind == "gaussian":
        return GaussianOutlier(np.asarray(d["mean"], dtype=float), np.asarray(d["covariance"], dtype=float))
    if kind == "student_t":
        return StudentT(float(d["nu"]), np.asarray(d["scale"], dtype=float))
    return Saturation(float(d["value"]), tuple(d["channels"]))


def _estimator_from_dict(d, linear):
    kind = d["kind"]
    if kind != "mhe":
        return EstimatorSpec(d["name"], kind)
    if d.get("stage_cost", "standard") == "beta":
        if d.get("beta") is None:
            raise ConfigError(f"estimator {d['name']!r}: beta stage cost needs a beta value")
        cost = Beta(float(d["beta"]))
    else:
        cost = Standard()
    cfg = MheConfig(horizon=int(d.get("horizon", 1)), stage_cost=cost,
                    arrival_filter=d.get("arrival_filter", "kf" if linear else "ekf"),
                    warm_start=bool(d.get("warm_start", True)),
                    hessian=d.get("hessian", "exact"))
    return EstimatorSpec(d["name"], "mhe", cfg)


def config_from_dict(d) -> ExperimentConfig:
    """Validate a JSON-style dict against the shipped schema and build a config."""
    try:
        jsonschema.validate(d, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    model, default_outlier, _ = build_model(d["model"], 1)
    linear = isinstance(model, LinearGaussianModel)
    c = d.get("contamination", {})
    p_c = float(c.get("p_c", 0.0))
    outlier = _outlier_from_dict(c.get("outlier", {"type": "default"}), default_outlier)
    try:
        return ExperimentConfig(
            model=d["model"],
            estimators=tuple(_estimator_from_dict(e, linear) for e in d["estimators"]),
            contamination=ContaminationSpec(p_c, outlier),
            n_trials=d["n_trials"],
            n_steps=d["n_steps"],
            base_seed=d.get("base_seed", 0),
            beta_grid=tuple(d.get("beta_grid", DEFAULT_BETA_GRID)),
            pc_grid=tuple(d.get("pc_grid", DEFAULT_PC_GRID)),
            name=d.get("name", ""),
            record_state_errors=d.get("record_state_errors", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(d)


def _outlier_to_dict(o):
    if isinstance(o, GaussianOutlier):
        return {"type": "gaussian", "mean": np.asarray(o.mean).tolist(),
                "covariance": np.asarray(o.covariance).tolist()}
    if isinstance(o, StudentT):
        return {"type": "student_t", "nu": o.nu, "scale": np.asarray(o.scale).tolist()}
    if isinstance(o, Saturation):
        return {"type": "saturation", "value": o.value, "channels": list(o.channels)}
    return {"type": "default"}


def _estimator_to_dict(e: EstimatorSpec):
    d = {"name": e.name, "kind": e.kind}
    if e.mhe is not None:
        m = e.mhe
        d.update(horizon=m.horizon, arrival_filter=m.arrival_filter, warm_start=m.warm_start,
                 hessian=m.hessian)
        if isinstance(m.stage_cost, Beta):
            d.update(stage_cost="beta", beta=m.stage_cost.beta)
        else:
            d["stage_cost"] = "standard"
    return d


def config_to_dict(cfg: ExperimentConfig):
    return {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "model": cfg.model,
        "contamination": {"p_c": cfg.contamination.p_c,
                          "outlier": _outlier_to_dict(cfg.contamination.outlier)},
        "estimators": [_estimator_to_dict(e) for e in cfg.estimators],
        "n_trials": cfg.n_trials,
        "n_steps": cfg.n_steps,
        "base_seed": cfg.base_seed,
        "beta_grid": list(cfg.beta_grid),
        "pc_grid": list(cfg.pc_grid),
        "record_state_errors": cfg.record_state_errors,
    }


# --------------------------------------------------------------------------
# metrics and results


def rmse(truth, estimates, n=None):
    """``sqrt(sum_t |x_t - xhat_t|^2 / (n * N))`` over a state sequence."""
    truth = np.asarray(truth, dtype=float)
    estimates = np.asarray(estimates, dtype=float)
    if truth.ndim == 1:
        truth = truth[:, None]
    if estimates.ndim == 1:
        estimates = estimates[:, None]
    if truth.shape != estimates.shape:
        raise ValueError(f"length mismatch: truth {truth.shape} vs estimates {estimates.shape}")
    if truth.shape[0] == 0:
        raise ValueError("empty state sequence")
    n = truth.shape[1] if n is None else n
    return math.sqrt(float(np.sum((truth - estimates) ** 2)) / (n * truth.shape[0]))


@dataclass
class TrialResult:
    estimator: str
    trial: int
    rmse: float
    errors: List[float] = field(default_factory=list)
    mean_step_ms: float = float("nan")
    median_step_ms: float = float("nan")
    status: str = "ok"
    seed: int = 0
    checksum: str = ""
    p_c: float = 0.0
    state_errors: Optional[List[List[float]]] = None

    @property
    def ok(self):
        return self.status == "ok"

    def recomputed_rmse(self, n):
        e = np.asarray(self.errors, dtype=float)
        return math.sqrt(float(np.sum(e ** 2)) / (n * e.size))


def simulate_trial(config: ExperimentConfig, model, contamination, controls, trial):
    """Simulate one trial; diverged or infeasible draws are replaced by deterministic redraws.

    For the vehicle a draw is infeasible when the Lidar passes closer than the
    fixture's ``min_clearance`` to a cone, i.e. the vehicle drives through it.
    """
    fx = load_vehicle_fixture() if config.model == "vehicle" else None
    base = trial_seed(config.base_seed, trial)
    for attempt in range(MAX_SIMULATION_ATTEMPTS):
        seed = base if attempt == 0 else base + (attempt << 32)
        try:
            traj = simulate_trajectory(model, contamination, config.n_steps, seed, controls)
        except SimulationDivergedError as exc:
            log.debug("trial %d attempt %d diverged at step %d", trial, attempt, exc.step)
            continue
        if fx is not None and landmark_clearance(fx, traj.states) < fx.get("min_clearance", 0.0):
            log.debug("trial %d attempt %d hits a cone", trial, attempt)
            continue
        return traj
    raise SimulationDivergedError(config.n_steps)


def _run_estimator(spec: EstimatorSpec, model, traj):
    """Return ``(estimates, per-step seconds)``."""
    if spec.kind == "mhe":
        trace = run_estimator(model, traj.measurements, spec.mhe, traj.controls)
        return trace.estimates, trace.step_times
    tic = time.perf_counter()
    means, _ = run_filter(spec.kind, model, traj.measurements, traj.controls)
    wall = time.perf_counter() - tic
    return means, np.full(len(means), wall / len(means))


def run_trial(config: ExperimentConfig, trial: int, contamination=None) -> List[TrialResult]:
    """Run every configured estimator on one shared trajectory."""
    contamination = contamination or config.contamination
    model, _, controls = build_model(config.model, config.n_steps)
    traj = simulate_trial(config, model, contamination, controls, trial)
    checksum = traj.checksum()
    truth = traj.states[1:]
    n = truth.shape[1]
    out = []
    for spec in config.estimators:
        res = TrialResult(spec.name, trial, float("nan"), seed=traj.seed, checksum=checksum,
                          p_c=contamination.p_c)
        try:
            est, times = _run_estimator(spec, model, traj)
            if not np.all(np.isfinite(est)):
                raise FloatingPointError("non-finite estimate")
        except Exception as exc:  # recorded per trial, never aborts the sweep
            res.status = f"failed: {type(exc).__name__}: {exc}"
            log.warning("%s trial %d: %s", spec.name, trial, res.status)
            out.append(res)
            continue
        diff = truth - est
        res.rmse = rmse(truth, est, n)
        res.errors = np.linalg.norm(diff, axis=1).tolist()
        res.mean_step_ms = float(np.mean(times) * 1e3)
        res.median_step_ms = float(np.median(times) * 1e3)
        if config.record_state_errors:
            res.state_errors = diff.tolist()
        out.append(res)
    return out


def _trial_task(args):
    cfg_dict, trial, p_c = args
    cfg = config_from_dict(cfg_dict)
    return run_trial(cfg, trial, cfg.contamination.with_p_c(p_c))


def default_workers():
    try:
        return max(1, int(os.environ.get("ROBUST_MHE_WORKERS", "1")))
    except ValueError:
        return 1


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None,
                   contamination: Optional[ContaminationSpec] = None) -> List[TrialResult]:
    """Run all trials; results are sorted by ``(estimator, trial)``."""
    workers = default_workers() if workers is None else max(1, int(workers))
    contamination = contamination or config.contamination
    results: List[TrialResult] = []
    if workers == 1:
        for trial in range(config.n_trials):
            results.extend(run_trial(config, trial, contamination))
    else:
        cfg_dict = config_to_dict(config)
        cfg_dict["contamination"]["outlier"] = _outlier_to_dict(contamination.outlier)
        tasks = [(cfg_dict, trial, contamination.p_c) for trial in range(config.n_trials)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_trial_task, tasks):
                results.extend(chunk)
    order = {e.name: i for i, e in enumerate(config.estimators)}
    results.sort(key=lambda r: (order[r.estimator], r.trial))
    return results


def beta_label(name, beta):
    return f"{name}({beta:g})"


def with_beta_grid(config: ExperimentConfig, template: str, grid=None) -> ExperimentConfig:
    """Replace the estimator ``template`` by one copy per beta in the grid."""
    grid = config.beta_grid if grid is None else tuple(grid)
    estimators = []
    found = False
    for e in config.estimators:
        if e.name != template:
            estimators.append(e)
            continue
        found = True
        for b in grid:
            estimators.append(EstimatorSpec(beta_label(e.name, b), "mhe",
                                            replace(e.mhe, stage_cost=Beta(b))))
    if not found:
        raise ConfigError(f"no estimator named {template!r}")
    return replace(config, estimators=tuple(estimators))


def beta_template(config: ExperimentConfig):
    for e in config.estimators:
        if e.kind == "mhe" and isinstance(e.mhe.stage_cost, Beta):
            return e.name
    raise ConfigError("config has no beta-MHE estimator to sweep")


def sweep_beta(config: ExperimentConfig, workers=None, template=None) -> List[TrialResult]:
    cfg = with_beta_grid(config, template or beta_template(config))
    return run_experiment(cfg, workers)


def sweep_pc(config: ExperimentConfig, workers=None) -> Dict[float, List[TrialResult]]:
    out = {}
    for p_c in config.pc_grid:
        out[p_c] = run_experiment(config, workers, config.contamination.with_p_c(p_c))
    return out


# --------------------------------------------------------------------------
# summaries


def summarize(results: Sequence[TrialResult]):
    """Per-estimator RMSE statistics over successful trials, in first-seen order."""
    groups: Dict[str, List[TrialResult]] = {}
    for r in results:
        groups.setdefault(r.estimator, []).append(r)
    rows = []
    for name, rs in groups.items():
        ok = [r for r in rs if r.ok]
        vals = np.array([r.rmse for r in ok])
        steps = np.array([r.mean_step_ms for r in ok])
        row = {"estimator": name, "n_ok": len(ok), "n_failed": len(rs) - len(ok)}
        if len(ok):
            row.update(mean=float(vals.mean()), std=float(vals.std(ddof=1)) if len(ok) > 1 else 0.0,
                       median=float(np.median(vals)), p5=float(np.percentile(vals, 5)),
                       p95=float(np.percentile(vals, 95)), mean_step_ms=float(steps.mean()))
        rows.append(row)
    return rows


def mean_rmse(results, estimator):
    vals = [r.rmse for r in results if r.estimator == estimator and r.ok]
    return float(np.mean(vals)) if vals else float("nan")


def mean_step_ms(results, estimator):
    vals = [r.mean_step_ms for r in results if r.estimator == estimator and r.ok]
    return float(np.mean(vals)) if vals else float("nan")


def failures(results):
    return [r for r in results if not r.ok]


def error_bands(results, estimator):
    """Per-step, per-state mean error and 95% band over trials (needs state errors)."""
    errs = [np.asarray(r.state_errors) for r in results
            if r.estimator == estimator and r.ok and r.state_errors is not None]
    if not errs:
        raise ValueError(f"no state errors recorded for {estimator!r}")
    E = np.stack(errs)
    return {"mean": E.mean(axis=0), "lo": np.percentile(E, 2.5, axis=0),
            "hi": np.percentile(E, 97.5, axis=0)}


# --------------------------------------------------------------------------
# export


def _float_text(x):
    return repr(float(x))


def export_results(results: Sequence[TrialResult], path, fmt="csv", include_timing=True):
    """Write results as CSV (summary columns) or JSON (every field).

    ``include_timing=False`` blanks the wall-time fields so that repeated
    runs of one configuration produce identical bytes.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_COLUMNS)
                for r in results:
                    ms = _float_text(r.mean_step_ms) if include_timing else ""
                    w.writerow([r.estimator, r.trial, _float_text(r.rmse), ms, r.status])
        elif fmt == "json":
            rows = []
            for r in results:
                d = asdict(r)
                if not include_timing:
                    d["mean_step_ms"] = d["median_step_ms"] = None
                rows.append(d)
            path.write_text(json.dumps(rows, indent=1) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}; use csv or json")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from None
    return path


def read_results(path, fmt=None) -> List[TrialResult]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "json":
        out = []
        for d in json.loads(path.read_text()):
            for key in ("mean_step_ms", "median_step_ms"):
                if d.get(key) is None:
                    d[key] = float("nan")
            out.append(TrialResult(**d))
        return out
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrialResult(r["estimator"], int(r["trial"]), float(r["rmse"]),
                        mean_step_ms=float(r["mean_step_ms"]) if r["mean_step_ms"] else float("nan"),
                        status=r["status"]) for r in rows]


def figure_config(fig_id) -> dict:
    """Pinned experiment configuration for a figure id, as a dict."""
    name = f"configs/{fig_id}.json"
    res = resources.files("robust_mhe").joinpath(name)
    if fig_id not in FIGURES or not res.is_file():
        raise KeyError(fig_id)
    return json.loads(res.read_text())


FIGURES = ("fig2", "fig3", "fig4", "fig5", "fig9", "fig10")


__all__ = [
    "ConfigError", "EstimatorSpec", "ExperimentConfig", "TrialResult", "rmse", "run_trial",
    "run_experiment", "sweep_beta", "sweep_pc", "with_beta_grid", "summarize", "export_results",
    "read_results", "config_from_dict", "config_to_dict", "load_config", "figure_config",
    "error_bands", "mean_rmse", "mean_step_ms", "FIGURES", "build_model",
]
