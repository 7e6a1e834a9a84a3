"""Run-configuration files, range parsing and measurement export.

Run configurations are INI files::

    [radar]          f_c, B, sweep_time, N, P, Q, d, c   (SI units)
    [target.<name>]  a, phi, r, theta  (theta_deg may replace theta)
    [noise]          sigma or snr_db, seed
    [estimator]      range_oversample, angle_oversample, music_subarray,
                     mle_delta, mle_max_iters
    [sweep]          snr_db (list or a:b:c range), trials, seed_base,
                     estimators, workers

Unknown sections or keys are rejected. ``section.key=value`` overrides are
applied on top of the file before anything is validated.
"""

from __future__ import annotations

import configparser
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .experiments import ESTIMATORS, EstimatorOptions
from .radar import MeasurementMatrix, RadarConfig, Target, paper_config, sigma_from_snr

log = logging.getLogger(__name__)

_RADAR_KEYS = {"f_c", "B", "sweep_time", "N", "P", "Q", "d", "c"}
_TARGET_KEYS = {"a", "phi", "r", "theta", "theta_deg"}
_SECTIONS = {
    "radar": _RADAR_KEYS,
    "noise": {"sigma", "snr_db", "seed"},
    "estimator": {"range_oversample", "angle_oversample", "music_subarray", "mle_delta",
                  "mle_max_iters"},
    "sweep": {"snr_db", "trials", "seed_base", "estimators", "workers"},
}


class ConfigError(ValueError):
    pass


def parse_range(text: str) -> List[float]:
    """``a:b:c`` (inclusive, step b) or a comma/space separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range must read start:step:stop, got {text!r}")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"range {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(count)]
    vals = [float(v) for v in text.replace(",", " ").split()]
    if not vals:
        raise ConfigError("empty list of values")
    return vals


@dataclass
class SweepSettings:
    snr_db: List[float] = field(default_factory=lambda: parse_range("-10:5:30"))
    trials: int = 300
    seed_base: int = 0
    estimators: Tuple[str, ...] = ESTIMATORS
    workers: int = 1


@dataclass
class RunConfig:
    radar: RadarConfig
    targets: List[Target]
    sigma: float = 0.0
    seed: Optional[int] = None
    options: EstimatorOptions = field(default_factory=EstimatorOptions)
    sweep: SweepSettings = field(default_factory=SweepSettings)


# keys that replace each other when given as an override
_EXCLUSIVE = {"sigma": "snr_db", "snr_db": "sigma", "theta": "theta_deg", "theta_deg": "theta"}


def apply_overrides(cp: configparser.ConfigParser, overrides: Iterable[str]):
    """Set ``section.key=value`` pairs; later pairs win.

    Overriding ``sigma`` drops a ``snr_db`` read from the file (and vice
    versa); ``theta`` and ``theta_deg`` behave the same way.
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigError(f"override {item!r} lacks a section (use section.key=value)")
        sec, key = lhs.strip().rsplit(".", 1)
        if not cp.has_section(sec):
            cp.add_section(sec)
        log.info("override %s.%s = %s", sec, key, value.strip())
        other = _EXCLUSIVE.get(key)
        if other and cp.has_option(sec, other):
            cp.remove_option(sec, other)
        cp[sec][key] = value.strip()


def _check_keys(cp: configparser.ConfigParser):
    unknown = []
    for sec in cp.sections():
        if sec.startswith("target."):
            allowed = _TARGET_KEYS
        elif sec in _SECTIONS:
            allowed = _SECTIONS[sec]
        else:
            unknown.append(f"[{sec}]")
            continue
        unknown.extend(f"{sec}.{k}" for k in cp[sec] if k not in allowed)
    if unknown:
        raise ConfigError("unknown configuration keys: " + ", ".join(unknown))


def _number(sec, key, cast=float):
    try:
        return cast(sec[key])
    except ValueError as exc:
        raise ConfigError(f"{sec.name}.{key}: {exc}") from None


def _radar(cp) -> RadarConfig:
    if not cp.has_section("radar"):
        return paper_config()
    sec = cp["radar"]
    base = paper_config()
    kw = {k: getattr(base, k) for k in ("f_c", "B", "sweep_time", "N", "P", "Q", "c")}
    for k in sec:
        kw[k] = _number(sec, k, int if k in ("N", "P", "Q") else float)
    return RadarConfig(**kw)


def _target(sec) -> Target:
    if "theta" in sec and "theta_deg" in sec:
        raise ConfigError(f"[{sec.name}] sets both theta and theta_deg")
    kw = {k: _number(sec, k) for k in ("a", "phi", "r") if k in sec}
    if "r" not in kw:
        raise ConfigError(f"[{sec.name}] lacks r")
    if "theta_deg" in sec:
        kw["theta"] = math.radians(_number(sec, "theta_deg"))
    elif "theta" in sec:
        kw["theta"] = _number(sec, "theta")
    return Target(**kw)


def read_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Parse a run configuration; without a file only overrides and defaults apply."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"configuration file {path} not found")
        cp.read_string(path.read_text())
    apply_overrides(cp, overrides)
    _check_keys(cp)

    try:
        radar = _radar(cp)
        targets = [_target(cp[s]) for s in cp.sections() if s.startswith("target.")]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    sigma, seed = 0.0, None
    if cp.has_section("noise"):
        sec = cp["noise"]
        if "sigma" in sec and "snr_db" in sec:
            raise ConfigError("[noise] sets both sigma and snr_db")
        if "sigma" in sec:
            sigma = _number(sec, "sigma")
        elif "snr_db" in sec:
            a = targets[0].a if targets else 1.0
            sigma = sigma_from_snr(_number(sec, "snr_db"), a, radar.P)
        if "seed" in sec:
            seed = _number(sec, "seed", int)

    opt_kw: Dict[str, object] = {}
    if cp.has_section("estimator"):
        sec = cp["estimator"]
        for k in ("range_oversample", "angle_oversample", "mle_max_iters"):
            if k in sec:
                opt_kw[k] = _number(sec, k, int)
        if "mle_delta" in sec:
            opt_kw["mle_delta"] = _number(sec, "mle_delta")
        if "music_subarray" in sec:
            parts = sec["music_subarray"].replace(",", " ").split()
            if len(parts) != 2:
                raise ConfigError("estimator.music_subarray needs two integers")
            opt_kw["music_subarray"] = (int(parts[0]), int(parts[1]))

    sweep = SweepSettings()
    if cp.has_section("sweep"):
        sec = cp["sweep"]
        if "snr_db" in sec:
            sweep.snr_db = parse_range(sec["snr_db"])
        for k in ("trials", "seed_base", "workers"):
            if k in sec:
                setattr(sweep, k, _number(sec, k, int))
        if "estimators" in sec:
            names = tuple(sec["estimators"].replace(",", " ").split())
            bad = [n for n in names if n not in ESTIMATORS]
            if bad:
                raise ConfigError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
            sweep.estimators = names
    return RunConfig(radar, targets, sigma, seed, EstimatorOptions(**opt_kw), sweep)


# --------------------------------------------------------------------------
# measurement export


def _radar_lines(config: RadarConfig) -> List[str]:
    return ["[radar]"] + [f"{k} = {getattr(config, k)!r}"
                          for k in ("f_c", "B", "sweep_time", "N", "P", "Q", "d", "c")]


def write_measurement(z: MeasurementMatrix, stem) -> Tuple[Path, Path]:
    """Write ``<stem>.hdr`` (configuration, sigma, seed) and ``<stem>.bin``.

    The binary file holds N*M complex samples as pairs of little-endian
    64-bit floats, row-major over (n, m).
    """
    stem = Path(stem)
    hdr, binf = stem.with_suffix(".hdr"), stem.with_suffix(".bin")
    lines = _radar_lines(z.config) + [
        "", "[noise]", f"sigma = {float(z.sigma)!r}",
        f"seed = {'' if z.seed is None else int(z.seed)}",
        "", "[data]", f"file = {binf.name}", f"shape = {z.config.N} {z.config.M}",
        "dtype = complex128 little-endian row-major",
    ]
    hdr.write_text("\n".join(lines) + "\n")
    np.ascontiguousarray(z.data, dtype="<c16").tofile(binf)
    return hdr, binf


def read_measurement(header) -> MeasurementMatrix:
    header = Path(header)
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(header.read_text())
    try:
        config = RadarConfig(**{k: (int(v) if k in ("N", "P", "Q") else float(v))
                                for k, v in cp["radar"].items()})
        binf = header.parent / cp["data"]["file"]
        data = np.fromfile(binf, dtype="<c16")
        if data.size != config.N * config.M:
            raise ConfigError(f"{binf} holds {data.size} samples, expected {config.N * config.M}")
        seed = cp["noise"].get("seed", "").strip()
        return MeasurementMatrix(data.reshape(config.N, config.M), config,
                                 sigma=float(cp["noise"]["sigma"]),
                                 seed=int(seed) if seed else None)
    except KeyError as exc:
        raise ConfigError(f"measurement header {header} lacks {exc}") from None
