"""Cramer-Rao bounds on single-target range and angle.

Parameters are ordered (a, psi, r, u). The Fisher information is
``I = (2/sigma^2) sum_{n,m} J[n,m]^T J[n,m]`` where J holds the partial
derivatives of the real and imaginary parts of the noiseless sample.
Amplitude decouples from the rest, so only the 3x3 (psi, r, u) block needs
inverting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .radar import RadarConfig, Target, sigma_from_snr

PARAMETERS = ("a", "psi", "r", "u")


class SingularFisherError(ValueError):
    pass


@dataclass(frozen=True)
class FisherInfo:
    """4x4 Fisher information of (a, psi, r, u) for one target."""

    matrix: np.ndarray
    sigma: float
    config: RadarConfig
    target: Target

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=float)
        if mat.shape != (4, 4):
            raise ValueError("expected a 4x4 Fisher information matrix")
        object.__setattr__(self, "matrix", mat)


@dataclass(frozen=True)
class CrbResult:
    sigma_r: float
    sigma_theta: float
    fim: FisherInfo

    @property
    def sigma_theta_deg(self) -> float:
        return math.degrees(self.sigma_theta)


def _index_sums(n_count: int):
    n = float(n_count)
    s1 = n * (n - 1.0) / 2.0
    s2 = (n - 1.0) * n * (2.0 * n - 1.0) / 6.0
    return s1, s2


def fisher_matrix(config: RadarConfig, target: Target, sigma: float) -> FisherInfo:
    """Closed-form 4x4 Fisher information of (a, psi, r, u)."""
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"noise standard deviation must be positive, got {sigma!r}")
    N, M = config.N, config.M
    a = target.a
    lam = config.wavelength
    beta = config.B / (config.c * N)
    Sn, Sn2 = _index_sums(N)
    Sm, Sm2 = _index_sums(M)
    two_pi = 2.0 * math.pi

    F = np.zeros((4, 4))
    F[0, 0] = M * N
    F[1, 1] = a * a * M * N
    F[1, 2] = 2.0 * two_pi * a * a * beta * M * Sn
    F[1, 3] = two_pi * a * a * (N * Sm / lam + beta * Sm * Sn)
    F[2, 2] = (2.0 * two_pi * a * beta) ** 2 * M * Sn2
    F[2, 3] = 2.0 * (two_pi * a) ** 2 * beta * (Sm * Sn / lam + beta * Sm * Sn2)
    F[3, 3] = (two_pi * a) ** 2 * (
        N * Sm2 / lam**2 + 2.0 * beta / lam * Sm2 * Sn + beta * beta * Sm2 * Sn2
    )
    F = np.triu(F) + np.triu(F, 1).T
    return FisherInfo(2.0 / sigma**2 * F, sigma, config, target)


def fisher_matrix_direct(config: RadarConfig, target: Target, sigma: float) -> np.ndarray:
    """Fisher information summed sample by sample in extended precision."""
    ld = np.longdouble
    n = np.arange(config.N, dtype=ld)[:, None]
    m = np.arange(config.M, dtype=ld)[None, :]
    a = ld(target.a)
    pi = ld(math.pi)
    lam = ld(config.c) / ld(config.f_c)
    beta = ld(config.B) / (ld(config.c) * config.N)
    u = ld(config.d) * ld(math.sin(target.theta))
    phase = ld(target.psi(config)) + 2 * pi * u * m / lam + 2 * pi * beta * (2 * ld(target.r) + m * u) * n
    c, s = np.cos(phase), np.sin(phase)
    dphase_r = 4 * pi * beta * n * np.ones_like(m)
    dphase_u = 2 * pi * m * (1 / lam + beta * n)
    # d/d theta of (a cos, a sin) = a (-sin, cos) * dphase
    grads_re = [c, -a * s, -a * s * dphase_r, -a * s * dphase_u]
    grads_im = [s, a * c, a * c * dphase_r, a * c * dphase_u]
    F = np.empty((4, 4), dtype=ld)
    for i in range(4):
        for j in range(4):
            F[i, j] = np.sum(grads_re[i] * grads_re[j] + grads_im[i] * grads_im[j])
    return (2 / ld(sigma) ** 2 * F).astype(float)


def _null_direction(fim: np.ndarray) -> str:
    w, V = np.linalg.eigh(fim)
    v = V[:, 0]
    parts = [f"{v[i]:+.3f}*{name}" for i, name in enumerate(PARAMETERS) if abs(v[i]) > 1e-3]
    return " ".join(parts)


def crb_range_angle(fim: FisherInfo, theta: Optional[float] = None) -> CrbResult:
    """Range and angle standard-deviation bounds from a (a, psi, r, u) FIM.

    The (psi, r, u) block is inverted with cofactors, so the two diagonal
    entries needed are obtained without forming the full inverse. ``theta``
    defaults to the angle of the target the FIM was built for.
    """
    if theta is None:
        theta = fim.target.theta
    if not abs(theta) < math.pi / 2:
        raise ValueError("theta must lie in (-pi/2, pi/2)")
    config = fim.config
    mat = fim.matrix
    J = mat[1:, 1:].astype(np.longdouble)
    det = (
        J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
        - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
        + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
    )
    scale = float(np.prod(np.diag(J)))
    if mat[0, 0] <= 0 or not det > 1e-12 * scale:
        raise SingularFisherError(
            "Fisher information is singular; unidentifiable direction: " + _null_direction(mat)
        )
    inv_rr = (J[0, 0] * J[2, 2] - J[0, 2] * J[2, 0]) / det
    inv_uu = (J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]) / det
    sigma_r = math.sqrt(float(inv_rr))
    sigma_theta = math.sqrt(float(inv_uu)) / (config.d * math.cos(theta))
    return CrbResult(sigma_r, sigma_theta, fim)


def crb(config: RadarConfig, target: Target, sigma: float) -> CrbResult:
    return crb_range_angle(fisher_matrix(config, target, sigma))


def crb_vs_snr(config: RadarConfig, target: Target, snr_db: Iterable[float]) -> List[dict]:
    """Rows of (snr_db, sigma_r_m, sigma_theta_deg) with SNR = P a^2 / sigma^2."""
    rows = []
    for s in snr_db:
        res = crb(config, target, sigma_from_snr(float(s), target.a, config.P))
        rows.append(dict(snr_db=float(s), sigma_r_m=res.sigma_r,
                         sigma_theta_deg=res.sigma_theta_deg))
    return rows


def write_crb_csv(path, rows: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["snr_db", "sigma_r_m", "sigma_theta_deg"])
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(float(row[k])) for k in w.fieldnames})
