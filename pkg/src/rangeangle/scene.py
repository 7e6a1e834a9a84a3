"""Parking-lot scene: parked vehicles, scatterers, radar mounts and the reference path.

Frames: the ground frame is (x_G, y_G). In the vehicle frame x_V points to
the right of the vehicle and y_V forward; the heading psi is the ground
angle of y_V, so ``p_G = X_G + R(psi - pi/2) p_V``. A radar's angle theta is
measured from its boresight, counter-clockwise positive.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .radar import RadarConfig, paper_config


def rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w == -math.pi, math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def vehicle_to_ground(points, X_G, psi) -> np.ndarray:
    return np.asarray(points, dtype=float) @ rot(psi - math.pi / 2).T + np.asarray(X_G)


def ground_to_vehicle(points, X_G, psi) -> np.ndarray:
    return (np.asarray(points, dtype=float) - np.asarray(X_G)) @ rot(psi - math.pi / 2)


@dataclass(frozen=True)
class Box:
    """Rectangle with ``length`` along its heading direction and ``width`` across."""

    center: Tuple[float, float]
    heading: float
    width: float
    length: float

    def corners(self) -> np.ndarray:
        hw, hl = self.width / 2.0, self.length / 2.0
        local = np.array([[-hw, -hl], [hw, -hl], [hw, hl], [-hw, hl]])
        return vehicle_to_ground(local, self.center, self.heading)

    def blocks(self, a, b, margin: float = 1e-6) -> np.ndarray:
        """True where the segment a[i] -> b[i] passes through the interior.

        The rectangle is shrunk by ``margin`` so that segments ending on the
        boundary (scatterers on the visible face) are not counted.
        """
        a = ground_to_vehicle(np.atleast_2d(a), self.center, self.heading)
        b = ground_to_vehicle(np.atleast_2d(b), self.center, self.heading)
        hw, hl = self.width / 2.0 - margin, self.length / 2.0 - margin
        d = b - a
        t0 = np.zeros(len(a))
        t1 = np.ones(len(a))
        hit = np.ones(len(a), dtype=bool)
        for axis, h in ((0, hw), (1, hl)):
            for p, q in ((-d[:, axis], a[:, axis] + h), (d[:, axis], h - a[:, axis])):
                parallel = p == 0
                hit &= ~(parallel & (q < 0))
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
                t0 = np.where(~parallel & (p < 0), np.maximum(t0, t), t0)
                t1 = np.where(~parallel & (p > 0), np.minimum(t1, t), t1)
        return hit & (t0 < t1)


@dataclass(frozen=True)
class RadarMount:
    name: str
    position: Tuple[float, float]
    boresight: float
    fov: float

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError("field of view must lie in (0, pi)")


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 4.0e4
    ki: float = 2.0e4
    kd: float = 1.6e4
    kp_psi: float = 20.0
    ki_psi: float = 0.0
    kd_psi: float = 0.0
    mass: float = 1000.0
    damping: float = 50.0
    v_ref: float = 1.95
    dt: float = 0.01
    sigma_v: float = 0.1
    sigma_psi_deg: float = 0.1


@dataclass
class ReferencePath:
    """Piecewise-linear path through (x, y, heading) waypoints."""

    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or len(w) < 2:
            raise ValueError("waypoints must be an array of at least two (x, y, heading) rows")
        w[:, 2] = np.unwrap(w[:, 2])
        self.waypoints = w
        seg = np.linalg.norm(np.diff(w[:, :2], axis=0), axis=1)
        if np.any(seg <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        self.s = np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def goal(self) -> np.ndarray:
        return self.waypoints[-1]

    def sample(self, s: float):
        """Position, heading and unit travel direction at arc length s."""
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2))
        f = (s - self.s[i]) / (self.s[i + 1] - self.s[i])
        p0, p1 = self.waypoints[i], self.waypoints[i + 1]
        pos = p0[:2] + f * (p1[:2] - p0[:2])
        heading = p0[2] + f * (p1[2] - p0[2])
        direction = (p1[:2] - p0[:2]) / (self.s[i + 1] - self.s[i])
        return pos, float(heading), direction


@dataclass
class ParkingScene:
    radar: RadarConfig
    vehicle_width: float
    vehicle_length: float
    parked: List[Box]
    scatterers: np.ndarray
    mounts: List[RadarMount]
    path: ReferencePath
    gains: ControllerGains = field(default_factory=ControllerGains)
    snr_db: float = 20.0
    robust_c: float = 0.03
    icp_max_iters: int = 50
    snapshot_pose: Tuple[float, float, float] = (0.0, 4.0, math.pi / 4)
    goal_tol: float = 0.05
    goal_tol_deg: float = 1.0
    max_frames: int = 1000

    def __post_init__(self):
        self.scatterers = np.asarray(self.scatterers, dtype=float).reshape(-1, 2)

    def mount_ground(self, mount: RadarMount, X_G, psi):
        pos = vehicle_to_ground(np.array(mount.position), X_G, psi)
        return pos, psi - math.pi / 2 + mount.boresight

    def visible(self, mount: RadarMount, X_G, psi):
        """Indices, ranges and angles of scatterers this radar can see.

        A scatterer is seen when it lies inside the field of view, inside the
        unambiguous range, and the line of sight does not cross a parked
        vehicle.
        """
        pos, bore = self.mount_ground(mount, X_G, psi)
        d = self.scatterers - pos
        r = np.hypot(d[:, 0], d[:, 1])
        theta = wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - bore)
        ok = (np.abs(theta) < mount.fov / 2.0) & (r > 0) & (r < self.radar.max_range)
        for box in self.parked:
            ok &= ~box.blocks(np.broadcast_to(pos, d.shape), self.scatterers)
        idx = np.flatnonzero(ok)
        return idx, r[idx], theta[idx]

    def detected(self, X_G, psi) -> np.ndarray:
        """Indices of scatterers seen by at least one radar."""
        seen = set()
        for mount in self.mounts:
            seen.update(self.visible(mount, X_G, psi)[0].tolist())
        return np.array(sorted(seen), dtype=int)


# --------------------------------------------------------------------------
# scene files

_SECTIONS = {
    "radar": {"f_c", "B", "sweep_time", "N", "P", "Q", "c", "snr_db"},
    "vehicle": {"width", "length"},
    "parked": {"boxes"},
    "scatterers": {"points"},
    "radars": {"mounts"},
    "path": {"waypoints"},
    "controller": set(ControllerGains.__dataclass_fields__),
    "localization": {"robust_c", "icp_max_iters", "goal_tol", "goal_tol_deg", "max_frames",
                     "snapshot_pose"},
}


class SceneFileError(ValueError):
    pass


def _rows(text: str, width: int) -> np.ndarray:
    rows = []
    for line in text.replace(";", "\n").splitlines():
        line = line.split("#")[0].strip()
        if not line:
            continue
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) != width:
            raise SceneFileError(f"expected {width} numbers per row, got {line!r}")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, width)


def parse_scene(text: str) -> ParkingScene:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    cp.read_string(text)
    unknown = []
    for sec in cp.sections():
        if sec not in _SECTIONS:
            unknown.append(f"[{sec}]")
            continue
        unknown.extend(f"{sec}.{k}" for k in cp[sec] if k not in _SECTIONS[sec])
    if unknown:
        raise SceneFileError("unknown scene keys: " + ", ".join(unknown))
    for sec in ("vehicle", "parked", "scatterers", "radars", "path"):
        if sec not in cp:
            raise SceneFileError(f"scene file lacks a [{sec}] section")

    radar_kw: Dict[str, float] = {}
    snr = 20.0
    if "radar" in cp:
        for k, v in cp["radar"].items():
            if k == "snr_db":
                snr = float(v)
            else:
                radar_kw[k] = int(v) if k in ("N", "P", "Q") else float(v)
    base = paper_config()
    radar = RadarConfig(**{**{f: getattr(base, f) for f in ("f_c", "B", "sweep_time", "N", "P",
                                                             "Q", "c")}, **radar_kw})

    veh = cp["vehicle"]
    width, length = float(veh["width"]), float(veh["length"])
    boxes = [Box((b[0], b[1]), math.radians(b[2]), width, length)
             for b in _rows(cp["parked"]["boxes"], 3)]
    points = _rows(cp["scatterers"]["points"], 2)
    mounts = []
    for line in cp["radars"]["mounts"].strip().splitlines():
        parts = line.split()
        if len(parts) != 5:
            raise SceneFileError(f"radar mount needs 'name x y boresight_deg fov_deg': {line!r}")
        x, y, bore, fov = (float(v) for v in parts[1:])
        mounts.append(RadarMount(parts[0], (x, y), math.radians(bore), math.radians(fov)))
    wp = _rows(cp["path"]["waypoints"], 3)
    wp[:, 2] = np.radians(wp[:, 2])
    gains = ControllerGains(**{k: float(v) for k, v in cp["controller"].items()}) \
        if "controller" in cp else ControllerGains()

    extra = {}
    if "localization" in cp:
        loc = cp["localization"]
        for k in ("robust_c", "goal_tol", "goal_tol_deg"):
            if k in loc:
                extra[k] = float(loc[k])
        for k in ("icp_max_iters", "max_frames"):
            if k in loc:
                extra[k] = int(loc[k])
        if "snapshot_pose" in loc:
            x, y, h = _rows(loc["snapshot_pose"], 3)[0]
            extra["snapshot_pose"] = (x, y, math.radians(h))
    return ParkingScene(radar, width, length, boxes, points, mounts, ReferencePath(wp),
                        gains, snr, **extra)


def load_scene(path: Optional[Path] = None) -> ParkingScene:
    """Read a scene file; the packaged back-in parking scene by default."""
    if path is None:
        text = resources.files("rangeangle").joinpath("data/parking_scene.ini").read_text()
    else:
        text = Path(path).read_text()
    return parse_scene(text)
