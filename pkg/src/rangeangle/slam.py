"""ICP ego-localization and the closed-loop back-in parking simulation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .radar import Target, TargetEstimate, sigma_from_snr, synthesize_measurement
from .scene import ParkingScene, rot, vehicle_to_ground, wrap_angle

log = logging.getLogger(__name__)


class IcpError(RuntimeError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)


@dataclass
class VehiclePose:
    X_G: np.ndarray
    psi: float
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    frame: int = 0

    def __post_init__(self):
        self.X_G = np.asarray(self.X_G, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        self.psi = wrap_angle(self.psi)


@dataclass(frozen=True)
class IcpSettings:
    max_iters: int = 50
    eps_translation: float = 1e-10
    eps_rotation: float = 1e-12
    robust_c: float = 0.03
    init: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.eps_translation > 0 and self.eps_rotation > 0 and self.robust_c > 0):
            raise ValueError("ICP thresholds and robust_c must be positive")


@dataclass
class IcpDiagnostics:
    iterations: int
    converged: bool
    objective: List[float]
    weights: np.ndarray
    pairing: np.ndarray


def _transform(points, dtheta, dX):
    return points @ rot(dtheta).T + np.asarray(dX)


def icp_associate(prev: PointCloud, next: PointCloud, dtheta: float, dX_V) -> np.ndarray:
    """For each prev point, the index of the nearest next point after the motion."""
    if len(prev) == 0 or len(next) == 0:
        raise IcpError("cannot associate an empty point cloud")
    moved = _transform(prev.points, dtheta, dX_V)
    _, idx = cKDTree(next.points).query(moved)
    return np.asarray(idx, dtype=int)


def rigid_objective(x, z, weights, dtheta, dX_V) -> float:
    res = (np.asarray(z) - np.asarray(dX_V)) - np.asarray(x) @ rot(dtheta).T
    return float(np.sum(np.asarray(weights) * np.sum(res * res, axis=1)))


def icp_solve_rigid(x, z, weights=None) -> Tuple[float, np.ndarray]:
    """Weighted 2D Procrustes: argmin sum w ||(z - dX) - R(dtheta) x||^2.

    When the x points all coincide the rotation is unobservable and is set to
    zero, leaving a translation-only fit.
    """
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    z = np.asarray(z, dtype=float).reshape(-1, 2)
    if len(x) != len(z) or len(x) == 0:
        raise IcpError("rigid fit needs equally many, and at least one, pairs")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.sum(w) > 0:
        raise IcpError("rigid fit weights must be non-negative with a positive sum")
    W = w.sum()
    xc = w @ x / W
    zc = w @ z / W
    xd = x - xc
    zd = z - zc
    dot = float(np.sum(w * np.sum(xd * zd, axis=1)))
    cross = float(np.sum(w * (xd[:, 0] * zd[:, 1] - xd[:, 1] * zd[:, 0])))
    spread = float(np.sum(w * np.sum(xd * xd, axis=1)))
    if spread <= 1e-24 * max(1.0, float(np.sum(w * np.sum(x * x, axis=1)))):
        dtheta = 0.0
    else:
        dtheta = math.atan2(cross, dot)
    dX = zc - rot(dtheta) @ xc
    return dtheta, dX


def welsch_weights(residuals, c: float) -> np.ndarray:
    r = np.asarray(residuals, dtype=float)
    return np.exp(-(r * r) / (c * c))


def icp(prev: PointCloud, next: PointCloud, settings: Optional[IcpSettings] = None):
    """Alternate nearest-neighbour association and Welsch-weighted rigid fits."""
    settings = settings or IcpSettings()
    if len(prev) == 0 or len(next) == 0:
        raise IcpError("ICP needs two non-empty point clouds")
    dtheta, dX = settings.init[0], np.array(settings.init[1:], dtype=float)
    tree = cKDTree(next.points)
    x = prev.points
    objective = []
    converged = False
    w = np.ones(len(x))
    idx = np.zeros(len(x), dtype=int)
    it = 0
    for it in range(1, settings.max_iters + 1):
        dist, idx = tree.query(_transform(x, dtheta, dX))
        w = welsch_weights(dist, settings.robust_c)
        if not np.sum(w) > 0:
            raise IcpError("all pairs rejected by the robust weights")
        z = next.points[idx]
        new_theta, new_X = icp_solve_rigid(x, z, w)
        objective.append(rigid_objective(x, z, w, new_theta, new_X))
        step_t = float(np.linalg.norm(new_X - dX))
        step_r = abs(new_theta - dtheta)
        dtheta, dX = new_theta, new_X
        if step_t < settings.eps_translation and step_r < settings.eps_rotation:
            converged = True
            break
    diag = IcpDiagnostics(it, converged, objective, w, idx)
    if not converged:
        log.debug("ICP stopped after %d iterations without converging", it)
    return dtheta, dX, diag


def to_ground(dtheta: float, dX_V, psi_next: float) -> Tuple[float, np.ndarray]:
    """Vehicle-frame motion to ground-frame (dpsi, dX_G)."""
    return -dtheta, rot(psi_next - math.pi / 2) @ (-np.asarray(dX_V, dtype=float))


def relative_motion(pose_prev: VehiclePose, pose_next: VehiclePose):
    """(dtheta, dX_V) induced on vehicle-frame coordinates by a ground motion."""
    dtheta = -(pose_next.psi - pose_prev.psi)
    dX_V = -(rot(pose_next.psi - math.pi / 2).T @ (pose_next.X_G - pose_prev.X_G))
    return wrap_angle(dtheta), dX_V


# --------------------------------------------------------------------------
# vehicle dynamics


@dataclass
class ControllerState:
    integral: np.ndarray = field(default_factory=lambda: np.zeros(2))
    integral_psi: float = 0.0
    prev_error_psi: float = 0.0


@dataclass(frozen=True)
class Reference:
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    heading_rate: float = 0.0


def vehicle_step(pose: VehiclePose, reference: Reference, dt: float, gains,
                 believed: Optional[VehiclePose] = None,
                 controller: Optional[ControllerState] = None,
                 rng: Optional[np.random.Generator] = None) -> VehiclePose:
    """Advance the point-mass vehicle by one frame.

    Force ``F = kp e + ki int(e) + kd (v_ref - v)`` with e the position error
    of the believed pose; the damped mass ``m dv/dt = F - b v`` is integrated
    exactly over the frame with F held constant. The heading follows the
    reference heading through its own PID. With ``rng`` the realised motion
    carries velocity and heading control errors.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    believed = believed or pose
    controller = controller if controller is not None else ControllerState()
    m, b = gains.mass, gains.damping

    err = reference.position - believed.X_G
    controller.integral = controller.integral + err * dt
    F = gains.kp * err + gains.ki * controller.integral + gains.kd * (reference.velocity - pose.velocity)

    decay = math.exp(-b * dt / m)
    v0 = pose.velocity
    v_inf = F / b
    v1 = v_inf + (v0 - v_inf) * decay
    disp = v_inf * dt + (v0 - v_inf) * (m / b) * (1.0 - decay)

    e_psi = wrap_angle(reference.heading - believed.psi)
    controller.integral_psi += e_psi * dt
    d_psi = (e_psi - controller.prev_error_psi) / dt
    controller.prev_error_psi = e_psi
    omega = reference.heading_rate + gains.kp_psi * e_psi + gains.ki_psi * controller.integral_psi \
        + gains.kd_psi * d_psi
    dpsi = omega * dt

    if rng is not None:
        speed = float(np.linalg.norm(disp)) / dt
        if speed > 0:
            along = disp / (speed * dt)
        else:
            along = rot(pose.psi) @ np.array([1.0, 0.0])
        disp = disp + rng.normal(0.0, gains.sigma_v) * dt * along
        dpsi += math.radians(rng.normal(0.0, gains.sigma_psi_deg))
    return VehiclePose(pose.X_G + disp, pose.psi + dpsi, v1, pose.frame + 1)


# --------------------------------------------------------------------------
# per-frame radar point clouds


Estimator = Callable[..., List[TargetEstimate]]


def _seed_for(config, r, theta):
    """Native-grid cell nearest to a scatterer: the detection handed to the estimators."""
    x = round(float(config.range_to_bin(r)))
    y = round(float(config.angle_to_bin(theta)))
    return x, y


def _distinct_seeds(config, rs, thetas):
    taken = set()
    seeds = []
    for r, th in zip(rs, thetas):
        x, y = _seed_for(config, r, th)
        if (x, y) in taken:
            # nudge to the free neighbouring cell on the scatterer's side
            fx = float(config.range_to_bin(r)) - x
            fy = float(config.angle_to_bin(th)) - y
            for dx, dy in ((np.sign(fx) or 1, 0), (0, np.sign(fy) or 1),
                           (-(np.sign(fx) or 1), 0), (0, -(np.sign(fy) or 1))):
                if (x + dx, y + dy) not in taken:
                    x, y = x + int(dx), y + int(dy)
                    break
        taken.add((x, y))
        u = y * config.wavelength / config.M
        seeds.append(TargetEstimate(a=1.0, psi=0.0, r=float(config.bin_to_range(x)),
                                    theta=float(math.asin(max(-1.0, min(1.0, u / config.d))))))
    return seeds


@dataclass
class FrameEstimate:
    """Scatterer estimates of one frame, fused over the radars."""

    indices: np.ndarray
    points_vehicle: np.ndarray
    true_points_vehicle: np.ndarray
    range_error: np.ndarray
    angle_error: np.ndarray
    radar: List[str]

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points_vehicle)


def scene_options():
    """Estimator options for scene frames.

    Noise dominates the scatterer errors there, so the likelihood iteration
    stops at a relative change of 1e-8 instead of the tighter default that
    the noiseless single-target cases need.
    """
    from .experiments import EstimatorOptions

    return EstimatorOptions(mle_delta=1e-8)


def estimate_frame(scene: ParkingScene, X_G, psi, estimator: str, rng: np.random.Generator,
                   options=None) -> FrameEstimate:
    """Synthesize every radar's measurement at the true pose and estimate its scatterers.

    ``estimator`` is one of fft2d / music2d / lse / mle, or ``"exact"`` for
    error-free positions. Each scatterer is reported once, by the radar that
    sees it at the shortest range (all reflectivities have unit magnitude,
    so that radar has the strongest return under free-space loss).
    """
    from .experiments import run_estimator

    if options is None:
        options = scene_options()
    config = scene.radar
    sigma = sigma_from_snr(scene.snr_db, 1.0, config.P)
    per_radar = []
    best = {}
    for mi, mount in enumerate(scene.mounts):
        idx, r, th = scene.visible(mount, X_G, psi)
        per_radar.append((idx, r, th))
        for j, (i, rr) in enumerate(zip(idx, r)):
            if i not in best or rr < best[i][2]:
                best[i] = (mi, j, rr)
    out_idx, pts, true_pts, er, ea, names = [], [], [], [], [], []
    for mi, mount in enumerate(scene.mounts):
        idx, r, th = per_radar[mi]
        mine = [j for j, i in enumerate(idx) if best[i][0] == mi]
        if not mine:
            continue
        phis = rng.uniform(0.0, 2.0 * math.pi, len(idx))
        noise_seed = int(rng.integers(2**63 - 1))
        if estimator == "exact":
            r_hat, th_hat = r.copy(), th.copy()
        else:
            targets = [Target(1.0, float(p), float(rr), float(t)) for p, rr, t in zip(phis, r, th)]
            z = synthesize_measurement(config, targets, sigma, seed=noise_seed)
            seeds = _distinct_seeds(config, r, th)
            K = len(idx)
            if estimator == "mle":
                # the likelihood models every visible scatterer jointly
                ests = run_estimator("mle", z, K, options, seeds=seeds)
            else:
                ests = [None] * K
                sub = run_estimator(estimator, z, K, options, seeds=[seeds[j] for j in mine])
                for j, e in zip(mine, sub):
                    ests[j] = e
            r_hat = np.array([ests[j].r if ests[j] is not None else np.nan for j in range(K)])
            th_hat = np.array([ests[j].theta if ests[j] is not None else np.nan for j in range(K)])
        for j in mine:
            rv = mount.position + r_hat[j] * np.array([math.cos(mount.boresight + th_hat[j]),
                                                        math.sin(mount.boresight + th_hat[j])])
            tv = mount.position + r[j] * np.array([math.cos(mount.boresight + th[j]),
                                                    math.sin(mount.boresight + th[j])])
            out_idx.append(int(idx[j]))
            pts.append(rv)
            true_pts.append(tv)
            er.append(r_hat[j] - r[j])
            ea.append(wrap_angle(th_hat[j] - th[j]))
            names.append(mount.name)
    order = np.argsort(out_idx)
    return FrameEstimate(
        np.array(out_idx, dtype=int)[order],
        np.array(pts, dtype=float).reshape(-1, 2)[order],
        np.array(true_pts, dtype=float).reshape(-1, 2)[order],
        np.array(er)[order], np.array(ea)[order], [names[i] for i in order],
    )


# --------------------------------------------------------------------------
# closed-loop parking


@dataclass
class FrameRecord:
    frame: int
    t: float
    true_x: float
    true_y: float
    true_psi: float
    est_x: float
    est_y: float
    est_psi: float
    n_scatterers: int
    icp_iters: int


@dataclass
class ParkingResult:
    estimator: str
    seed: int
    records: List[FrameRecord]
    final_position_error: float
    final_heading_error_deg: float
    goal_distance: float
    frames: int
    reached_goal: bool
    icp_failures: int
    dead_reckoned: int
    clouds: List["FrameEstimate"] = field(default_factory=list)

    def to_csv(self, path):
        names = list(FrameRecord.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for rec in self.records:
                w.writerow([getattr(rec, n) if isinstance(getattr(rec, n), int)
                            else repr(float(getattr(rec, n))) for n in names])


def _reference_at(scene: ParkingScene, t: float) -> Reference:
    path = scene.path
    v = scene.gains.v_ref
    s = min(v * t, path.length)
    pos, heading, direction = path.sample(s)
    moving = v * t < path.length
    vel = direction * v if moving else np.zeros(2)
    # heading rate along the path (finite difference of the interpolated heading)
    if moving:
        h2 = path.sample(min(s + 1e-3, path.length))[1]
        rate = (h2 - heading) / 1e-3 * v
    else:
        rate = 0.0
    return Reference(pos, vel, heading, rate)


def run_parking(scene: ParkingScene, estimator: str, seed: int = 0, options=None,
                icp_settings: Optional[IcpSettings] = None,
                progress: Optional[Callable[[int], None]] = None,
                keep_clouds: bool = False) -> ParkingResult:
    """Closed-loop back-in parking with radar/ICP localization.

    Each frame: synthesize and estimate the scatterers at the true pose, run
    ICP against the previous frame's cloud, update the believed pose, and
    drive the vehicle one frame towards the reference. The run stops once the
    believed pose is within the goal tolerances after the reference has
    reached the end of the path. ``keep_clouds`` stores every frame's
    scatterer estimates on the result.
    """
    rng = np.random.default_rng(seed)
    gains = scene.gains
    dt = gains.dt
    start = scene.path.start
    true_pose = VehiclePose(start[:2], start[2])
    believed = VehiclePose(start[:2], start[2])
    controller = ControllerState()
    settings = icp_settings or IcpSettings(max_iters=scene.icp_max_iters, robust_c=scene.robust_c)
    records: List[FrameRecord] = []
    prev_cloud: Optional[PointCloud] = None
    last_motion = (0.0, np.zeros(2))
    icp_failures = dead_reckoned = 0
    clouds: List[FrameEstimate] = []
    goal = scene.path.goal
    reached = False
    frame = 0
    for frame in range(scene.max_frames):
        t = frame * dt
        est = estimate_frame(scene, true_pose.X_G, true_pose.psi, estimator, rng, options)
        if keep_clouds:
            clouds.append(est)
        cloud = PointCloud(est.points_vehicle[np.all(np.isfinite(est.points_vehicle), axis=1)],
                           frame)
        icp_iters = 0
        if prev_cloud is not None:
            try:
                if len(cloud) == 0 or len(prev_cloud) == 0:
                    raise IcpError("empty point cloud")
                init = (last_motion[0], *last_motion[1])
                dtheta, dX_V, diag = icp(prev_cloud, cloud, replace(settings, init=init))
                icp_iters = diag.iterations
                if not diag.converged:
                    icp_failures += 1
                last_motion = (dtheta, dX_V)
            except IcpError as exc:
                log.info("frame %d: ICP failed (%s); dead-reckoning", frame, exc)
                icp_failures += 1
                dead_reckoned += 1
                dtheta, dX_V = last_motion
            dpsi, dX_G = to_ground(dtheta, dX_V, believed.psi - dtheta)
            believed = VehiclePose(believed.X_G + dX_G, believed.psi + dpsi,
                                   true_pose.velocity, frame)
        if len(cloud):
            prev_cloud = cloud
        records.append(FrameRecord(frame, t, float(true_pose.X_G[0]), float(true_pose.X_G[1]),
                                   float(true_pose.psi), float(believed.X_G[0]),
                                   float(believed.X_G[1]), float(believed.psi), len(cloud),
                                   icp_iters))
        if progress:
            progress(frame)
        ref = _reference_at(scene, t)
        done_ref = gains.v_ref * t >= scene.path.length
        if done_ref and np.linalg.norm(believed.X_G - goal[:2]) < scene.goal_tol and \
                abs(wrap_angle(believed.psi - goal[2])) < math.radians(scene.goal_tol_deg):
            reached = True
            break
        true_pose = vehicle_step(true_pose, ref, dt, gains, believed, controller, rng)
    final_err = float(np.linalg.norm(true_pose.X_G - believed.X_G))
    head_err = math.degrees(abs(wrap_angle(true_pose.psi - believed.psi)))
    goal_dist = float(np.linalg.norm(true_pose.X_G - goal[:2]))
    return ParkingResult(estimator, seed, records, final_err, head_err, goal_dist, frame + 1,
                         reached, icp_failures, dead_reckoned, clouds)
