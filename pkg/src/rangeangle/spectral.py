"""Grid-based range/angle estimators: 2D-FFT, 2D-MUSIC and LSE.

Bin coordinates: ``x`` is the range frequency in cycles per N samples and
``y`` the angle frequency in cycles per M antennas. A fine grid with
oversampling G places candidates at multiples of 1/G bin, the same lattice a
G-times zero-padded FFT produces. Searching the full lattice at G=2048 is
impractical, so each peak is located on a coarse grid, refined continuously,
and then snapped to the best lattice point in its neighbourhood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .radar import MeasurementMatrix, RadarConfig, TargetEstimate

EXCLUSION_BINS = 2
COARSE_OVERSAMPLE = 4
_SNAP_HALF_WIDTH = 3


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class GridSpec:
    range_oversample: int = 2048
    angle_oversample: int = 2048
    # ((x_lo, x_hi), (y_lo, y_hi)) in native bins, y signed
    search_window: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None

    def __post_init__(self):
        if self.range_oversample < 1 or self.angle_oversample < 1:
            raise ValueError("oversampling factors must be >= 1")

    @property
    def cell(self) -> Tuple[float, float]:
        return 1.0 / self.range_oversample, 1.0 / self.angle_oversample


@dataclass(frozen=True)
class BinEstimate:
    n_p: float
    m_p: float
    power: float


@dataclass
class SpectralResult:
    algorithm: str
    estimates: List[TargetEstimate]
    bins: List[BinEstimate]
    requested: int
    unresolved: bool = False

    def __len__(self):
        return len(self.estimates)

    def __getitem__(self, i):
        return self.estimates[i]

    def __iter__(self):
        return iter(self.estimates)


# --------------------------------------------------------------------------
# DTFT and helpers


def dtft_value(z: MeasurementMatrix, x: float, y: float) -> complex:
    if not (math.isfinite(x) and math.isfinite(y)):
        raise ValueError("DTFT frequencies must be finite")
    N, M = z.data.shape
    ex = np.exp(-2j * math.pi * x * np.arange(N) / N)
    ey = np.exp(-2j * math.pi * y * np.arange(M) / M)
    return complex(ex @ z.data @ ey)


def dtft_grid(data: np.ndarray, xs, ys) -> np.ndarray:
    """|S| is not taken: returns complex S on the outer grid xs x ys."""
    N, M = data.shape
    ex = np.exp(-2j * math.pi * np.outer(np.asarray(xs, dtype=float), np.arange(N)) / N)
    ey = np.exp(-2j * math.pi * np.outer(np.arange(M), np.asarray(ys, dtype=float)) / M)
    return ex @ data @ ey


def signed_angle_bin(m_p: float, M: int) -> float:
    """Map an angle bin in [0, M) to the signed interval [-M/2, M/2)."""
    m_p = float(m_p) % M
    return m_p - M if m_p >= M / 2 else m_p


def bins_to_estimate(config: RadarConfig, x: float, y: float, power: float = float("nan"),
                     a: float = float("nan"), psi: float = float("nan")) -> TargetEstimate:
    ys = signed_angle_bin(y, config.M)
    u = ys * config.wavelength / config.M
    return TargetEstimate(
        a=a, psi=psi, r=float(config.bin_to_range(x)),
        theta=float(config.bin_to_angle(ys)), u=float(u), power=float(power),
    )


def estimate_to_bins(config: RadarConfig, est: TargetEstimate) -> Tuple[float, float]:
    return float(config.range_to_bin(est.r)), float(config.angle_to_bin(est.theta))


def pick_peaks(power: np.ndarray, K: int, exclusion: Tuple[int, int],
               wrap_columns: bool = True) -> List[Tuple[int, int]]:
    """Greedy K-peak search: take the maximum, mask a rectangle around it, repeat.

    A candidate must also be a local maximum of its 3x3 neighbourhood so that
    mainlobe shoulders left over after masking are not reported.
    """
    work = np.array(power, dtype=float, copy=True)
    rows, cols = work.shape
    padded = np.pad(power, ((1, 1), (0, 0)), mode="constant", constant_values=-np.inf)
    if wrap_columns:
        padded = np.concatenate([padded[:, -1:], padded, padded[:, :1]], axis=1)
    else:
        padded = np.pad(padded, ((0, 0), (1, 1)), mode="constant", constant_values=-np.inf)
    neigh = np.max(
        np.stack([padded[1 + di:1 + di + rows, 1 + dj:1 + dj + cols]
                  for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]),
        axis=0,
    )
    work[power < neigh] = -np.inf
    ex_r, ex_c = exclusion
    found = []
    for _ in range(K):
        idx = int(np.argmax(work))
        i, j = divmod(idx, cols)
        if not np.isfinite(work[i, j]):
            break
        found.append((i, j))
        r_lo, r_hi = max(0, i - ex_r), min(rows, i + ex_r + 1)
        cidx = np.arange(j - ex_c, j + ex_c + 1)
        if wrap_columns:
            cidx %= cols
        else:
            cidx = cidx[(cidx >= 0) & (cidx < cols)]
        work[r_lo:r_hi, cidx] = -np.inf
    return found


def _window_mask(xs, ys, window, M):
    if window is None:
        return None
    (x_lo, x_hi), (y_lo, y_hi) = window
    ysig = np.array([signed_angle_bin(y, M) for y in ys])
    return ((xs >= x_lo) & (xs <= x_hi))[:, None] & ((ysig >= y_lo) & (ysig <= y_hi))[None, :]


def _log_newton_step(v, hx, hy):
    """Vertex offset of a quadratic fitted to log(v) on a 3x3 stencil, or None.

    Peaks of |S| and of the MUSIC pseudospectrum are much closer to Gaussian
    than to quadratic, hence the log domain.
    """
    v = np.log(np.maximum(v, v.max() * 1e-300))
    gx = (v[2, 1] - v[0, 1]) / (2 * hx)
    gy = (v[1, 2] - v[1, 0]) / (2 * hy)
    hxx = (v[2, 1] - 2 * v[1, 1] + v[0, 1]) / hx**2
    hyy = (v[1, 2] - 2 * v[1, 1] + v[1, 0]) / hy**2
    hxy = (v[2, 2] - v[2, 0] - v[0, 2] + v[0, 0]) / (4 * hx * hy)
    det = hxx * hyy - hxy * hxy
    if not (hxx < 0 and det > 0):
        return None
    return -(hyy * gx - hxy * gy) / det, -(hxx * gy - hxy * gx) / det


def _stencil_search(objective, x0, y0, span, stop, max_evals=200):
    """Maximise a smooth peak with a shrinking 3x3 stencil.

    Every stencil also yields a log-quadratic fit. When the centre is the
    best of the nine samples the step size shrinks by four and the centre
    jumps to the fitted vertex if that lies inside the stencil. Otherwise the
    centre follows the fitted vertex (up to eight steps away, which handles
    oblique ridges) or, without a usable fit, moves to the best sample and
    doubles the step. A jump that lands lower than the best sample already
    seen is undone. The search is confined to x0 +- span[0], y0 +- span[1]
    and stops after ``max_evals`` stencils (needle-thin MUSIC ridges in
    crowded scenes can otherwise be followed almost indefinitely).
    """
    sx, sy = span
    x, y = x0, y0
    hx0, hy0 = sx / 2.0, sy / 2.0
    hx, hy = hx0, hy0
    off = np.array([-1.0, 0.0, 1.0])
    fallback = None  # (x, y, value) of the best sample before a jump
    for _ in range(max_evals):
        xs = np.clip(x + hx * off, x0 - sx, x0 + sx)
        ys = np.clip(y + hy * off, y0 - sy, y0 + sy)
        v = objective(xs, ys)
        if fallback is not None and v[1, 1] < fallback[2]:
            x, y = fallback[0], fallback[1]
            fallback = None
            hx, hy = hx / 2.0, hy / 2.0
            continue
        fallback = None
        i, j = np.unravel_index(int(np.argmax(v)), v.shape)
        step = _log_newton_step(v, hx, hy)
        if (i, j) != (1, 1) and v[i, j] > v[1, 1]:
            if step is not None and max(abs(step[0]) / hx, abs(step[1]) / hy) <= 8.0:
                fallback = (xs[i], ys[j], v[i, j])
                x = float(np.clip(x + step[0], x0 - sx, x0 + sx))
                y = float(np.clip(y + step[1], y0 - sy, y0 + sy))
            else:
                x, y = xs[i], ys[j]
                hx, hy = min(2.0 * hx, hx0), min(2.0 * hy, hy0)
            continue
        if hx < stop[0] and hy < stop[1]:
            break
        if step is not None and abs(step[0]) <= hx and abs(step[1]) <= hy:
            x = float(np.clip(x + step[0], x0 - sx, x0 + sx))
            y = float(np.clip(y + step[1], y0 - sy, y0 + sy))
        hx, hy = hx / 4.0, hy / 4.0
    return x, y


def refine_on_lattice(
    objective: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: float, y0: float, cell: Tuple[float, float], span: Tuple[float, float],
) -> Tuple[float, float, float]:
    """Maximise ``objective`` near (x0, y0) and return the best lattice point.

    ``objective(xs, ys)`` evaluates the outer grid. The continuous optimum is
    searched inside x0 +- span[0], y0 +- span[1]; lattice points within a few
    cells of it are then compared exhaustively.
    """
    cx, cy = cell
    xc, yc = _stencil_search(objective, x0, y0, span, (cx / 4.0, cy / 4.0))
    ix = np.round(xc / cx) + np.arange(-_SNAP_HALF_WIDTH, _SNAP_HALF_WIDTH + 1)
    iy = np.round(yc / cy) + np.arange(-_SNAP_HALF_WIDTH, _SNAP_HALF_WIDTH + 1)
    vals = objective(ix * cx, iy * cy)
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    return float(ix[i] * cx), float(iy[j] * cy), float(vals[i, j])


# --------------------------------------------------------------------------
# 2D-FFT


def native_grid_peaks(z: MeasurementMatrix, K: int) -> List[BinEstimate]:
    """K strongest peaks of the un-padded N x M FFT magnitude."""
    spec = np.abs(np.fft.fft2(z.data))
    found = pick_peaks(spec, K, (EXCLUSION_BINS, EXCLUSION_BINS))
    if not found:
        raise EstimatorError("no peak found on the native grid")
    return [BinEstimate(float(i), float(j), float(spec[i, j])) for i, j in found]


def fft_spectrum(z: MeasurementMatrix, range_oversample: int = 4, angle_oversample: int = 4) -> np.ndarray:
    """|2D-FFT| of the zero-padded measurement, axes (range bin, angle bin)."""
    N, M = z.data.shape
    return np.abs(np.fft.fft2(z.data, s=(N * range_oversample, M * angle_oversample)))


def _fft_objective(data):
    return lambda xs, ys: np.abs(dtft_grid(data, xs, ys))


def _seed_bins(config: RadarConfig, seeds: Sequence[TargetEstimate]):
    return [estimate_to_bins(config, s) for s in seeds]


def fft2d_estimate(z: MeasurementMatrix, K: int, grid: Optional[GridSpec] = None,
                   seeds: Optional[Sequence[TargetEstimate]] = None) -> SpectralResult:
    """K strongest local maxima of the zero-padded 2D-FFT magnitude.

    With ``seeds`` the search is local: one peak is taken near each seed
    (detections supplied by an upstream stage), so one estimate is returned
    per seed.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    grid = grid or GridSpec()
    config = z.config
    objective = _fft_objective(z.data)
    starts = _coarse_starts(z, K, grid, seeds, objective, fft_coarse=True)
    return _refine_all("fft2d", config, starts, K, grid, objective)


def _coarse_starts(z, K, grid, seeds, objective, fft_coarse=False):
    N, M = z.data.shape
    g = COARSE_OVERSAMPLE
    if seeds is not None:
        starts = []
        for xs0, ys0 in _seed_bins(z.config, seeds):
            xs = xs0 + np.arange(-g, g + 1) / g
            ys = ys0 + np.arange(-g, g + 1) / g
            vals = objective(xs, ys)
            i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
            starts.append((xs[i], ys[j]))
        return starts
    xs = np.arange(N * g) / g
    ys = np.arange(M * g) / g
    if fft_coarse:
        vals = np.abs(np.fft.fft2(z.data, s=(N * g, M * g)))
    else:
        vals = objective(xs, ys)
    mask = _window_mask(xs, ys, grid.search_window, M)
    if mask is not None:
        vals = np.where(mask, vals, -np.inf)
    found = pick_peaks(vals, K, (EXCLUSION_BINS * g, EXCLUSION_BINS * g))
    return [(xs[i], ys[j]) for i, j in found]


def _refine_all(name, config, starts, K, grid, objective) -> SpectralResult:
    span = 1.0 / COARSE_OVERSAMPLE
    bins, ests = [], []
    for x0, y0 in starts:
        x, y, p = refine_on_lattice(objective, x0, y0, grid.cell, (span, span))
        y %= config.M
        bins.append(BinEstimate(x, y, p))
        ests.append(bins_to_estimate(config, x, y, p))
    return SpectralResult(name, ests, bins, K, unresolved=len(ests) < K)


# --------------------------------------------------------------------------
# 2D-MUSIC


def smoothed_covariance(data: np.ndarray, Ns: int, Ms: int) -> np.ndarray:
    """Forward spatially-smoothed covariance of vectorised Ns x Ms blocks."""
    N, M = data.shape
    win = np.lib.stride_tricks.sliding_window_view(data, (Ns, Ms))
    X = win.reshape(-1, Ns * Ms)
    return (X.T @ X.conj()) / X.shape[0]


class MusicSpectrum:
    """2D-MUSIC pseudospectrum over the uncoupled steering model."""

    def __init__(self, z: MeasurementMatrix, K: int, subarray: Tuple[int, int] = (10, 10)):
        N, M = z.data.shape
        Ns, Ms = subarray
        if not (1 <= Ns <= N and 1 <= Ms <= M):
            raise ValueError(f"subarray {subarray} does not fit a {N}x{M} measurement")
        L = Ns * Ms
        if K >= L:
            raise EstimatorError(f"K={K} must be smaller than the subarray size {L}")
        blocks = (N - Ns + 1) * (M - Ms + 1)
        if blocks < K + 1:
            raise EstimatorError(
                f"only {blocks} smoothing blocks for K={K}; covariance is rank deficient"
            )
        self.N, self.M, self.Ns, self.Ms = N, M, Ns, Ms
        R = smoothed_covariance(z.data, Ns, Ms)
        w, V = np.linalg.eigh(R)
        self.eigenvalues = w
        self.L = L
        # ||P_noise a||^2 = L - ||Es^H a||^2 since every steering entry has unit modulus
        self.Es = V[:, L - K:].T.conj().reshape(K, Ns, Ms)

    def __call__(self, xs, ys) -> np.ndarray:
        ax = np.exp(2j * math.pi * np.outer(np.asarray(xs, dtype=float), np.arange(self.Ns)) / self.N)
        ay = np.exp(2j * math.pi * np.outer(np.arange(self.Ms), np.asarray(ys, dtype=float)) / self.M)
        coef = np.matmul(np.matmul(ax, self.Es), ay)
        proj = np.einsum("kxy,kxy->xy", coef.real, coef.real) + np.einsum(
            "kxy,kxy->xy", coef.imag, coef.imag)
        Q = self.L - proj
        return 1.0 / np.maximum(Q, self.L * 1e-15)


def music2d_estimate(z: MeasurementMatrix, K: int, subarray: Tuple[int, int] = (10, 10),
                     grid: Optional[GridSpec] = None,
                     seeds: Optional[Sequence[TargetEstimate]] = None) -> SpectralResult:
    """K strongest peaks of the 2D-MUSIC pseudospectrum (signal subspace of size K).

    With ``seeds`` one peak is searched near each seed instead.
    """
    grid = grid or GridSpec()
    spectrum = MusicSpectrum(z, K, subarray)
    starts = _coarse_starts(z, K, grid, seeds, spectrum)
    return _refine_all("music2d", z.config, starts, K, grid, spectrum)


# --------------------------------------------------------------------------
# LSE


def column_dtft(data: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """sum_n data[n, m] exp(-j 2 pi f[..., m] n / N), one frequency per column.

    The fast-time exponentials are factored as n = h*b + l so that only
    2*sqrt(N) exponentials are needed per frequency.
    """
    N, M = data.shape
    h = max(1, math.isqrt(N))
    blocks = -(-N // h)
    padded = np.zeros((blocks * h, M), dtype=complex)
    padded[:N] = data
    zr = padded.reshape(blocks, h, M)
    w = -2.0 * math.pi * np.asarray(freqs, dtype=float)[..., None] / N
    fine = np.exp(1j * w * np.arange(h))
    coarse = np.exp(1j * w * (h * np.arange(blocks)))
    inner = np.einsum("blm,...ml->...mb", zr, fine)
    return np.einsum("...mb,...mb->...m", inner, coarse)


def lse_objective(z: MeasurementMatrix):
    """|sum z conj(model)| with the per-antenna range coupling kept, in bin units."""
    config = z.config
    N, M = z.data.shape
    m = np.arange(M)
    # coupling: range frequency shifts by y*B/(M f_c) per antenna
    coupling = config.B * config.wavelength / (M * config.c)

    def objective(xs, ys):
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        ysig = np.mod(ys + M / 2.0, M) - M / 2.0
        freq = xs[:, None, None] + coupling * ysig[None, :, None] * m
        cols = column_dtft(z.data, freq)
        steer = np.exp(-2j * math.pi * np.outer(ysig, m) / M)
        return np.abs(np.einsum("xym,ym->xy", cols, steer))

    return objective


def lse_estimate(z: MeasurementMatrix, K: int, grid: Optional[GridSpec] = None,
                 init: Optional[Sequence[TargetEstimate]] = None) -> SpectralResult:
    """Per-target localized grid search of the coupled matched objective J(r, u).

    Each target is refined independently inside +-1 native bin of its seed;
    the other targets are not cancelled. With ``init`` one estimate is
    returned per seed, otherwise K seeds come from a coarse 2D-FFT.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    grid = grid or GridSpec()
    if init is None:
        init = fft2d_estimate(z, K, GridSpec(COARSE_OVERSAMPLE, COARSE_OVERSAMPLE)).estimates
    config = z.config
    objective = lse_objective(z)
    bins, ests = [], []
    for x0, y0 in _seed_bins(config, init):
        if not (0 <= x0 < config.N):
            raise EstimatorError(f"seed range bin {x0:.3f} outside [0, {config.N})")
        g = COARSE_OVERSAMPLE
        xs = x0 + np.arange(-g, g + 1) / g
        ys = y0 + np.arange(-g, g + 1) / g
        vals = objective(xs, ys)
        i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
        x, y, p = refine_on_lattice(objective, xs[i], ys[j], grid.cell, (1.0 / g, 1.0 / g))
        x = float(np.clip(x, x0 - 1.0, x0 + 1.0))
        y = float(np.clip(y, y0 - 1.0, y0 + 1.0))
        bins.append(BinEstimate(x, y % config.M, p))
        ests.append(bins_to_estimate(config, x, y, p))
    return SpectralResult("lse", ests, bins, K)


def lse_slice(z: MeasurementMatrix, r: float, thetas) -> np.ndarray:
    """J(r, u(theta)) along an angle cut at fixed range."""
    config = z.config
    objective = lse_objective(z)
    x = float(config.range_to_bin(r))
    ys = config.angle_to_bin(np.asarray(thetas, dtype=float))
    return objective(np.array([x]), np.atleast_1d(ys))[0]


# --------------------------------------------------------------------------
# bias formulas


def bias_prediction(config: RadarConfig, theta: float) -> Tuple[float, float]:
    """Range and angle bias of an uncoupled 2D frequency estimator."""
    if not abs(theta) < math.pi / 2:
        raise ValueError("theta must lie in (-pi/2, pi/2)")
    s = (1.0 + config.B / (2.0 * config.f_c)) * math.sin(theta)
    if abs(s) > 1.0:
        raise ValueError(f"biased sine {s:.6f} outside [-1, 1]")
    range_bias = (config.M - 1) * config.wavelength / 8.0 * math.sin(theta)
    return range_bias, math.asin(s) - theta


def biased_peak_bins(config: RadarConfig, r: float, theta: float) -> Tuple[float, float]:
    """Location of the DTFT maximum predicted for a single noiseless target."""
    x_r = float(config.range_to_bin(r))
    y_theta = float(config.angle_to_bin(theta))
    x_theta = config.B * config.d * math.sin(theta) / config.c
    return x_r + (config.M - 1) / 2.0 * x_theta, y_theta + config.M / 2.0 * x_theta
