"""FMCW MIMO radar configuration and deramped measurement synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299792458.0


@dataclass(frozen=True)
class RadarConfig:
    """Waveform, sampling and virtual-array geometry.

    ``d`` defaults to half a wavelength. ``c`` is kept as a field so that
    configurations quoted with a rounded propagation speed (3e8 m/s) can be
    reproduced bin-for-bin.
    """

    f_c: float = 77e9
    B: float = 4e9
    sweep_time: float = 1e-4
    N: int = 256
    P: int = 4
    Q: int = 4
    d: Optional[float] = None
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.d is None:
            object.__setattr__(self, "d", self.c / self.f_c / 2.0)
        for name in ("f_c", "B", "sweep_time", "d", "c"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        for name in ("N", "P", "Q"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.f_c <= self.B:
            raise ValueError("carrier frequency must exceed the sweep bandwidth")
        if self.N <= self.M:
            raise ValueError(f"need N > M (N={self.N}, M={self.M})")

    @property
    def M(self) -> int:
        return self.P * self.Q

    @property
    def wavelength(self) -> float:
        return self.c / self.f_c

    @property
    def sample_period(self) -> float:
        return self.sweep_time / self.N

    @property
    def chirp_rate(self) -> float:
        return self.B / (self.N * self.sample_period)

    @property
    def range_resolution(self) -> float:
        return self.c / (2.0 * self.B)

    @property
    def max_range(self) -> float:
        """Largest range whose beat frequency stays inside the principal interval."""
        return self.N * self.c / (2.0 * self.B)

    @property
    def kappa(self) -> float:
        """Phase slope 2*pi*B/(c*N) applied to path length per fast-time sample."""
        return 2.0 * math.pi * self.B / (self.c * self.N)

    # bin-index conversions -------------------------------------------------
    def range_to_bin(self, r):
        return 2.0 * self.B * np.asarray(r) / self.c

    def bin_to_range(self, x):
        return np.asarray(x) * self.c / (2.0 * self.B)

    def angle_to_bin(self, theta):
        return self.M * self.d * np.sin(theta) / self.wavelength

    def bin_to_angle(self, y):
        s = np.asarray(y) * self.wavelength / (self.M * self.d)
        return np.arcsin(np.clip(s, -1.0, 1.0))

    def u_to_angle(self, u):
        return np.arcsin(np.clip(np.asarray(u) / self.d, -1.0, 1.0))


def paper_config() -> RadarConfig:
    """77 GHz / 4 GHz / 100 us, N=256, 4x4 MIMO, with c rounded to 3e8 m/s."""
    return RadarConfig(f_c=77e9, B=4e9, sweep_time=1e-4, N=256, P=4, Q=4, c=3e8)


@dataclass(frozen=True)
class Target:
    a: float = 1.0
    phi: float = 0.0
    r: float = 1.0
    theta: float = 0.0

    def __post_init__(self):
        for name in ("a", "phi", "r", "theta"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"target {name} must be finite")
        if self.a < 0:
            raise ValueError("reflectivity magnitude must be non-negative")
        if self.r <= 0:
            raise ValueError("range must be positive")
        if not abs(self.theta) < math.pi / 2:
            raise ValueError("angle must lie in (-pi/2, pi/2)")

    def u(self, config: RadarConfig) -> float:
        return config.d * math.sin(self.theta)

    def psi(self, config: RadarConfig) -> float:
        """Lumped phase: reflectivity phase, residual video phase at m=0, carrier delay."""
        tau0 = 2.0 * self.r / config.c
        return (
            self.phi
            - math.pi * config.chirp_rate * tau0**2
            + 4.0 * math.pi * config.f_c * self.r / config.c
        )


@dataclass(frozen=True)
class TargetEstimate:
    """Estimated (a, psi, r, theta) of one target; ``u`` is d*sin(theta)."""

    a: float
    psi: float
    r: float
    theta: float
    u: float = float("nan")
    power: float = float("nan")

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)


@dataclass
class MeasurementMatrix:
    data: np.ndarray
    config: RadarConfig
    sigma: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        shape = (self.config.N, self.config.M)
        if self.data.shape != shape:
            raise ValueError(f"measurement shape {self.data.shape} != {shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("measurement contains non-finite samples")

    def __add__(self, other: "MeasurementMatrix") -> "MeasurementMatrix":
        if other.config != self.config:
            raise ValueError("cannot add measurements from different configurations")
        return MeasurementMatrix(self.data + other.data, self.config)

    def scaled(self, factor: complex) -> "MeasurementMatrix":
        return replace(self, data=self.data * factor)


def _check_target(config: RadarConfig, target: Target):
    if not target.r < config.max_range:
        raise ValueError(
            f"target range {target.r} m is beyond the unambiguous range "
            f"{config.max_range:.3f} m"
        )


def synthesize_target(config: RadarConfig, target: Target) -> MeasurementMatrix:
    """Noiseless deramped samples of a single target (phase-lumped model)."""
    _check_target(config, target)
    n = np.arange(config.N)[:, None]
    m = np.arange(config.M)[None, :]
    u = target.u(config)
    phase = (
        target.psi(config)
        + 2.0 * math.pi * u / config.wavelength * m
        + config.kappa * (2.0 * target.r + m * u) * n
    )
    return MeasurementMatrix(target.a * np.exp(1j * phase), config)


def synthesize_exact(config: RadarConfig, target: Target) -> np.ndarray:
    """Deramped samples with the per-antenna delay kept in every phase term.

    No phase lumping: the residual video phase pi*gamma*tau[m]^2 is evaluated
    for each antenna. Used to measure the error of the lumped model.
    """
    n = np.arange(config.N)[:, None]
    m = np.arange(config.M)[None, :]
    tau = (2.0 * target.r + m * target.u(config)) / config.c
    gamma = config.chirp_rate
    phase = (
        target.phi
        + 2.0 * math.pi * config.f_c * tau
        + 2.0 * math.pi * gamma * tau * config.sample_period * n
        - math.pi * gamma * tau**2
    )
    return target.a * np.exp(1j * phase)


def complex_noise(shape, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Circular complex Gaussian samples with E|w|^2 = sigma^2, first axis fastest."""
    rows, cols = shape
    parts = rng.standard_normal((cols, rows, 2)) * (sigma / math.sqrt(2.0))
    return (parts[..., 0] + 1j * parts[..., 1]).T


def synthesize_measurement(
    config: RadarConfig,
    targets: Sequence[Target],
    sigma: float = 0.0,
    seed: Optional[int] = None,
) -> MeasurementMatrix:
    if not (sigma >= 0 and math.isfinite(sigma)):
        raise ValueError(f"noise standard deviation must be >= 0, got {sigma!r}")
    data = np.zeros((config.N, config.M), dtype=complex)
    for target in targets:
        data += synthesize_target(config, target).data
    if sigma > 0:
        rng = np.random.default_rng(seed)
        data += complex_noise(data.shape, sigma, rng)
        return MeasurementMatrix(data, config, sigma=sigma, seed=seed)
    return MeasurementMatrix(data, config)


def sigma_from_snr(snr_db: float, a: float = 1.0, P: int = 4) -> float:
    """Noise std for SNR = P*a^2/sigma^2 (in dB)."""
    return math.sqrt(P * a * a / 10.0 ** (snr_db / 10.0))


def snr_db(a: float, sigma: float, P: int) -> float:
    return 10.0 * math.log10(P * a * a / sigma**2)
