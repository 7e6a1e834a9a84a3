"""Monte-Carlo RMSE sweeps and the parking-scene point-cloud study."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import mle, spectral
from .crb import crb
from .radar import (
    MeasurementMatrix, RadarConfig, Target, TargetEstimate, sigma_from_snr,
    synthesize_measurement,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("fft2d", "music2d", "lse", "mle")


@dataclass(frozen=True)
class EstimatorOptions:
    range_oversample: int = 2048
    angle_oversample: int = 2048
    music_subarray: Tuple[int, int] = (10, 10)
    mle_delta: float = 1e-12
    mle_max_iters: int = 100

    @property
    def grid(self) -> spectral.GridSpec:
        return spectral.GridSpec(self.range_oversample, self.angle_oversample)

    @property
    def mle_settings(self) -> mle.MlSettings:
        return mle.MlSettings(delta=self.mle_delta, max_iters=self.mle_max_iters)


def run_estimator(name: str, z: MeasurementMatrix, K: int,
                  options: Optional[EstimatorOptions] = None,
                  seeds: Optional[Sequence[TargetEstimate]] = None) -> List[TargetEstimate]:
    """Run one of the four estimators and return its target estimates.

    ``seeds`` restricts the grid searches to the neighbourhood of each seed
    and initialises the MLE there instead of on the native grid.
    """
    options = options or EstimatorOptions()
    if name == "fft2d":
        return list(spectral.fft2d_estimate(z, K, options.grid, seeds=seeds))
    if name == "music2d":
        return list(spectral.music2d_estimate(z, K, options.music_subarray, options.grid,
                                              seeds=seeds))
    if name == "lse":
        return list(spectral.lse_estimate(z, K, options.grid, init=seeds))
    if name == "mle":
        return mle.estimate(z, K, options.mle_settings, init=seeds).estimates
    raise ValueError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATORS)}")


@dataclass
class Scenario:
    config: RadarConfig
    targets: Sequence[Target]
    snr_grid: Sequence[float]
    trials: int = 300
    estimators: Sequence[str] = ESTIMATORS
    seed_base: int = 0
    options: EstimatorOptions = field(default_factory=EstimatorOptions)

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if len(self.snr_grid) == 0:
            raise ValueError("snr_grid must not be empty")
        if len(self.targets) == 0:
            raise ValueError("scenario needs at least one target")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimators: {unknown}")

    @property
    def reference_amplitude(self) -> float:
        """Amplitude that the SNR refers to (the first target's)."""
        return self.targets[0].a


@dataclass(frozen=True)
class RmseRow:
    estimator: str
    snr_db: float
    target: int
    rmse_r: float
    rmse_theta_deg: float
    count: int
    failures: int
    crb_r: float
    crb_theta_deg: float


@dataclass
class RmseTable:
    rows: List[RmseRow]
    trials: int

    def get(self, estimator: str, snr_db: float, target: int = 0) -> RmseRow:
        for row in self.rows:
            if row.estimator == estimator and row.target == target and math.isclose(
                row.snr_db, snr_db, abs_tol=1e-9
            ):
                return row
        raise KeyError((estimator, snr_db, target))

    def to_csv(self, path):
        names = list(RmseRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in self.rows:
                w.writerow([_fmt(getattr(row, n)) for n in names])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def normalized_coords(config: RadarConfig, r, theta) -> np.ndarray:
    """(range bin, angle bin) coordinates used for association."""
    return np.column_stack([config.range_to_bin(np.asarray(r, dtype=float)),
                            config.angle_to_bin(np.asarray(theta, dtype=float))])


def associate(config: RadarConfig, truths: Sequence[Target],
              estimates: Sequence[TargetEstimate]) -> Dict[int, int]:
    """Map truth index -> estimate index by minimum total normalized distance."""
    if not estimates:
        return {}
    t = normalized_coords(config, [x.r for x in truths], [x.theta for x in truths])
    e = normalized_coords(config, [x.r for x in estimates], [x.theta for x in estimates])
    cost = np.linalg.norm(t[:, None, :] - e[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return {int(i): int(j) for i, j in zip(rows, cols)}


def _trial(scenario: Scenario, snr_db: float, trial: int):
    """Errors per estimator: array (K, 2) of (dr m, dtheta deg), NaN for unmatched."""
    config = scenario.config
    rng = np.random.default_rng(scenario.seed_base + trial)
    phis = rng.uniform(0.0, 2.0 * math.pi, len(scenario.targets))
    noise_seed = int(rng.integers(2**63 - 1))
    truths = [replace(t, phi=float(p)) for t, p in zip(scenario.targets, phis)]
    sigma = sigma_from_snr(snr_db, scenario.reference_amplitude, config.P)
    z = synthesize_measurement(config, truths, sigma, seed=noise_seed)
    K = len(truths)
    out = {}
    for name in scenario.estimators:
        try:
            ests = run_estimator(name, z, K, scenario.options)
        except (mle.MleError, spectral.EstimatorError, np.linalg.LinAlgError) as exc:
            log.info("trial %d, %s at %g dB failed: %s", trial, name, snr_db, exc)
            out[name] = None
            continue
        err = np.full((K, 2), np.nan)
        for i, j in associate(config, truths, ests).items():
            err[i, 0] = ests[j].r - truths[i].r
            err[i, 1] = math.degrees(ests[j].theta - truths[i].theta)
        out[name] = err
    return out


def _trial_job(args):
    return _trial(*args)


def run_rmse_sweep(scenario: Scenario, workers: int = 1,
                   progress: Optional[Callable[[float, int], None]] = None) -> RmseTable:
    config = scenario.config
    K = len(scenario.targets)
    rows = []
    for snr in scenario.snr_grid:
        snr = float(snr)
        jobs = [(scenario, snr, t) for t in range(scenario.trials)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                results = list(pool.map(_trial_job, jobs, chunksize=8))
        else:
            results = []
            for job in jobs:
                results.append(_trial_job(job))
                if progress:
                    progress(snr, job[2])
        sigma = sigma_from_snr(snr, scenario.reference_amplitude, config.P)
        for name in scenario.estimators:
            errs = [r[name] for r in results if r[name] is not None]
            failures = scenario.trials - len(errs)
            stack = np.array(errs) if errs else np.full((0, K, 2), np.nan)
            for k, target in enumerate(scenario.targets):
                bound = crb(config, target, sigma)
                e = stack[:, k, :]
                e = e[np.all(np.isfinite(e), axis=1)]
                if len(e):
                    rmse = np.sqrt(np.mean(e**2, axis=0))
                else:
                    rmse = (float("nan"), float("nan"))
                rows.append(RmseRow(name, snr, k, float(rmse[0]), float(rmse[1]), len(e),
                                    failures, bound.sigma_r, bound.sigma_theta_deg))
    return RmseTable(rows, scenario.trials)


# --------------------------------------------------------------------------
# parking-scene point cloud


@dataclass(frozen=True)
class PointCloudSummary:
    estimator: str
    rmse_range: float
    rmse_angle_deg: float
    rmse_position: float
    detected: int
    total: int
    frames: int
    clouds: tuple = field(default=(), compare=False, repr=False)


def run_point_cloud(scene, estimator: str, frames: int = 1, seed: int = 0,
                    pose: Optional[Tuple[float, float, float]] = None,
                    options: Optional[EstimatorOptions] = None) -> PointCloudSummary:
    """Scatterer range/angle/position RMSE with the vehicle held at one pose.

    Each frame draws fresh reflectivity phases and noise; errors are pooled
    over the detected scatterers of all frames.
    """
    from .slam import estimate_frame

    if frames < 1:
        raise ValueError("frames must be >= 1")
    x, y, psi = pose if pose is not None else scene.snapshot_pose
    rng = np.random.default_rng(seed)
    er, ea, ep = [], [], []
    clouds = []
    detected = 0
    for _ in range(frames):
        est = estimate_frame(scene, np.array([x, y]), psi, estimator, rng, options)
        clouds.append(est)
        detected = len(est.indices)
        ok = np.isfinite(est.range_error) & np.isfinite(est.angle_error)
        er.append(est.range_error[ok])
        ea.append(est.angle_error[ok])
        ep.append(np.linalg.norm(est.points_vehicle[ok] - est.true_points_vehicle[ok], axis=1))
    er, ea, ep = (np.concatenate(v) if v else np.zeros(0) for v in (er, ea, ep))

    def rms(v):
        return float(np.sqrt(np.mean(v**2))) if len(v) else 0.0

    return PointCloudSummary(estimator, rms(er), math.degrees(rms(ea)), rms(ep), detected,
                             len(scene.scatterers), frames, tuple(clouds))


_SUMMARY_COLUMNS = ("estimator", "rmse_range", "rmse_angle_deg", "rmse_position", "detected",
                    "total", "frames")


def write_point_cloud_csv(path, summaries: Sequence[PointCloudSummary]):
    names = _SUMMARY_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for s in summaries:
            w.writerow([_fmt(getattr(s, n)) for n in names])
