"""Joint maximum-likelihood range/angle estimation for multiple targets.

The cost minimised here is the negative log-likelihood with the data energy
and the 1/sigma^2 factor removed::

    L = -sum_m sum_k a_k (E_k R_k + conj(E_k R_k))
        + sum_m sum_k sum_{l!=k} a_k a_l E_k conj(E_l) R_lk
        + M N sum_k a_k^2,

with ``E_k = exp(j(psi_k + 2 pi u_k m / lambda))``, ``R_k`` the correlation of
the data with target k's fast-time chirp and ``R_lk`` the correlation of the
chirps of targets l and k. ``L = ||z - s||^2 - ||z||^2``, so smaller is a
better fit. Parameters are updated coordinate-wise: closed-form phase, joint
linear amplitude solve, then one Newton-Raphson step in u and r per target.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .radar import MeasurementMatrix, RadarConfig, TargetEstimate

log = logging.getLogger(__name__)

# |1 - q| below which geometric sums fall back to direct summation
_GEOM_DIRECT_THRESHOLD = 0.01


class MleError(RuntimeError):
    pass


class AmplitudeSolveError(MleError):
    def __init__(self, cond: float):
        super().__init__(
            f"amplitude system is ill-conditioned (cond={cond:.3e}); targets nearly coincide"
        )
        self.cond = cond


class NonFiniteDerivative(MleError):
    pass


@dataclass
class MlSettings:
    delta: float = 1e-12
    relative_delta: bool = True
    max_iters: int = 100
    newton_max_step: float = 0.125
    hessian_guard: bool = True
    max_condition: float = 1e12

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.newton_max_step > 0:
            raise ValueError("newton_max_step must be positive")


@dataclass
class MlState:
    a: np.ndarray
    psi: np.ndarray
    r: np.ndarray
    u: np.ndarray
    iteration: int = 0
    likelihood: float = float("nan")
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.a = np.array(self.a, dtype=float, ndmin=1)
        self.psi = np.array(self.psi, dtype=float, ndmin=1)
        self.r = np.array(self.r, dtype=float, ndmin=1)
        self.u = np.array(self.u, dtype=float, ndmin=1)
        if not (len(self.a) == len(self.psi) == len(self.r) == len(self.u)):
            raise ValueError("state arrays must have equal length")

    @property
    def K(self) -> int:
        return len(self.a)

    def copy(self) -> "MlState":
        return MlState(
            self.a.copy(), self.psi.copy(), self.r.copy(), self.u.copy(),
            self.iteration, self.likelihood, list(self.notes),
        )


@dataclass
class MlResult:
    estimates: List[TargetEstimate]
    state: MlState
    iterations: int
    likelihood: float
    converged: bool
    history: List[float]
    trace: List[MlState] = field(default_factory=list)

    def write_trace(self, path):
        """Per-iteration CSV: iter, likelihood, then r, u, a, psi of every target."""
        if not self.trace:
            raise ValueError("no trace recorded; run estimate(..., keep_trace=True)")
        K = self.trace[0].K
        header = ["iter", "likelihood"] + [f"{p}_{k}" for k in range(K)
                                           for p in ("r", "u", "a", "psi")]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for st in self.trace:
                row = [st.iteration, repr(float(st.likelihood))]
                for k in range(K):
                    row += [repr(float(v)) for v in (st.r[k], st.u[k], st.a[k], st.psi[k])]
                w.writerow(row)


# --------------------------------------------------------------------------
# correlation sums


def geometric_moments(alpha, N: int):
    """Return sum_{n<N} n^p exp(j alpha n) for p = 0, 1, 2 (broadcast over alpha)."""
    alpha = np.asarray(alpha, dtype=float)
    q = np.exp(1j * alpha)
    qN = np.exp(1j * N * alpha)
    one_minus_q = 1.0 - q
    near = np.abs(one_minus_q) < _GEOM_DIRECT_THRESHOLD
    inv = 1.0 / np.where(near, 1.0, one_minus_q)
    inv2 = inv * inv
    qqN = q * qN
    s0 = (1.0 - qN) * inv
    s1 = (q - N * qN + (N - 1) * qqN) * inv2
    s2 = (
        q * (1.0 + q) - (N * N) * qN + (2 * N * N - 2 * N - 1) * qqN - (N - 1) ** 2 * q * qqN
    ) * (inv2 * inv)
    if np.any(near):
        n = np.arange(N, dtype=float)
        e = np.exp(1j * np.multiply.outer(alpha[near], n))
        s0 = np.array(s0, dtype=complex)
        s1 = np.array(s1, dtype=complex)
        s2 = np.array(s2, dtype=complex)
        s0[near] = e.sum(axis=-1)
        s1[near] = e @ n
        s2[near] = e @ (n * n)
    return s0, s1, s2


def _chirp_phasors(beta: np.ndarray, N: int) -> np.ndarray:
    """exp(j beta n) for n < N, appended as the second-to-last axis.

    Built as an outer product of coarse and fine steps (n = b*h + l) so that
    only about 2*sqrt(N) complex exponentials are evaluated per beta.
    """
    h = max(1, int(math.isqrt(N)))
    blocks = -(-N // h)
    fine = np.exp(1j * beta[..., None, :] * np.arange(h, dtype=float)[:, None])
    coarse = np.exp(1j * beta[..., None, :] * (h * np.arange(blocks, dtype=float))[:, None])
    e = coarse[..., :, None, :] * fine[..., None, :, :]
    return e.reshape(*beta.shape[:-1], blocks * h, beta.shape[-1])[..., :N, :]


def corr_single(z, r_k: float, u_k: float, m=None, config: Optional[RadarConfig] = None):
    """Data-to-chirp correlation sum_n conj(z[n,m]) exp(j kappa (2 r + m u) n).

    ``z`` may be a MeasurementMatrix or a raw array (then ``config`` is needed).
    With ``m=None`` the whole length-M vector is returned.
    """
    data, config = _unpack(z, config)
    ms = np.arange(config.M) if m is None else np.atleast_1d(m)
    n = np.arange(config.N)
    beta = config.kappa * (2.0 * r_k + ms * u_k)
    e = np.exp(1j * np.multiply.outer(n, beta))
    out = np.einsum("nm,nm->m", np.conj(data[:, ms]), e)
    return out if m is None or np.ndim(m) else out[0]


def corr_cross(r_k, u_k, r_l, u_l, m, config: RadarConfig):
    """Chirp cross-correlation sum_n exp(j kappa (2 (r_k - r_l) + m (u_k - u_l)) n)."""
    alpha = config.kappa * (2.0 * (r_k - r_l) + np.asarray(m) * (u_k - u_l))
    return geometric_moments(alpha, config.N)[0]


def _unpack(z, config):
    if isinstance(z, MeasurementMatrix):
        return z.data, z.config
    if config is None:
        raise ValueError("raw arrays need an explicit RadarConfig")
    return np.asarray(z, dtype=complex), config


# --------------------------------------------------------------------------
# correlation moments shared by all updates of one iteration


@dataclass
class Moments:
    """Data and cross-chirp correlations at one set of (r, u).

    ``T[p][k, m] = sum_n n^p conj(z[n, m]) exp(j beta_k n)`` and
    ``C[p][k, l, m] = sum_n n^p exp(j (beta_k - beta_l) n)`` with the diagonal
    of ``C`` zeroed, so that ``C[0][k, l] = R_(l,k)`` for l != k.
    """

    r: np.ndarray
    u: np.ndarray
    T: tuple
    C: tuple


def compute_moments(data: np.ndarray, config: RadarConfig, r, u) -> Moments:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    N, K = config.N, len(r)
    n = np.arange(N, dtype=float)
    m = np.arange(config.M, dtype=float)
    beta = config.kappa * (2.0 * r[:, None] + m[None, :] * u[:, None])
    e = _chirp_phasors(beta, N) * np.conj(data)[None]
    T = (e.sum(axis=1), n @ e, (n * n) @ e)
    C = tuple(np.zeros((K, K, config.M), dtype=complex) for _ in range(3))
    if K > 1:
        # C[p][l, k] = conj(C[p][k, l]); evaluate the upper triangle only
        iu, ju = np.triu_indices(K, 1)
        upper = geometric_moments(beta[iu] - beta[ju], N)
        for c, s in zip(C, upper):
            c[iu, ju] = s
            c[ju, iu] = np.conj(s)
    return Moments(r.copy(), u.copy(), T, C)


def _moments_for(state: "MlState", data, config, moments: Optional[Moments]) -> Moments:
    if (
        moments is not None
        and np.array_equal(moments.r, state.r)
        and np.array_equal(moments.u, state.u)
    ):
        return moments
    return compute_moments(data, config, state.r, state.u)


def _phasors(state: "MlState", config: RadarConfig) -> np.ndarray:
    """E_k^(m) = exp(j(psi_k + 2 pi u_k m / lambda)), shape (K, M)."""
    m = np.arange(config.M, dtype=float)
    return np.exp(
        1j * (state.psi[:, None] + 2.0 * math.pi * state.u[:, None] / config.wavelength * m)
    )


def _cancelled(state: "MlState", mom: Moments, config: RadarConfig):
    """D_p = T_p - sum_{l!=k} a_l conj(E_l) C_p[k, l], for p = 0, 1, 2."""
    w = state.a[:, None] * np.conj(_phasors(state, config))
    return tuple(t - np.einsum("klm,lm->km", c, w) for t, c in zip(mom.T, mom.C))


@dataclass
class _Terms:
    """S_k^(m) and its u/r derivatives (rows are targets), plus E_k^(m)."""

    E: np.ndarray
    S: np.ndarray
    S_u: np.ndarray
    S_uu: np.ndarray
    S_r: np.ndarray
    S_rr: np.ndarray


def _all_terms(state: "MlState", mom: Moments, config: RadarConfig) -> _Terms:
    kap = config.kappa
    m = np.arange(config.M, dtype=float)
    D0, D1, D2 = _cancelled(state, mom, config)
    return _Terms(
        E=_phasors(state, config),
        S=D0,
        S_u=1j * kap * m * D1,
        S_uu=-((kap * m) ** 2) * D2,
        S_r=2j * kap * D1,
        S_rr=-((2.0 * kap) ** 2) * D2,
    )


def interference_cancelled_corr(state: "MlState", z, k: int, moments: Optional[Moments] = None):
    """S_k^(m): target k's correlation with the modelled other targets removed."""
    data, config = _unpack(z, None)
    mom = _moments_for(state, data, config, moments)
    return _cancelled(state, mom, config)[0][k]


# --------------------------------------------------------------------------
# likelihood and coordinate updates


def _likelihood_from(state: "MlState", mom: Moments, config: RadarConfig) -> float:
    E = _phasors(state, config)
    a = state.a
    total = config.M * config.N * float(np.sum(a * a))
    total -= 2.0 * float(np.sum(a * np.real(np.sum(E * mom.T[0], axis=1))))
    if state.K > 1:
        cross = np.real(np.einsum("km,lm,klm->kl", E, np.conj(E), mom.C[0]))
        total += float(a @ cross @ a)
    return total


def likelihood(state: "MlState", z, moments: Optional[Moments] = None) -> float:
    data, config = _unpack(z, None)
    return _likelihood_from(state, _moments_for(state, data, config, moments), config)


def _psi_from(state, mom, config, k, D0k) -> Optional[float]:
    m = np.arange(config.M)
    acc = np.sum(np.exp(2j * math.pi * state.u[k] / config.wavelength * m) * D0k)
    if abs(acc) == 0.0 or not np.isfinite(acc):
        state.notes.append(f"iter {state.iteration}: degenerate phase update for target {k}")
        return None
    return float(-np.angle(acc))


def update_psi(state: "MlState", z, k: int, moments: Optional[Moments] = None) -> float:
    data, config = _unpack(z, None)
    mom = _moments_for(state, data, config, moments)
    new = _psi_from(state, mom, config, k, _cancelled(state, mom, config)[0][k])
    return float(state.psi[k]) if new is None else new


def _amplitude_system_from(state, mom, config):
    E = _phasors(state, config)
    y = np.real(np.sum(E * mom.T[0], axis=1))
    Bm = np.real(np.einsum("km,lm,klm->kl", E, np.conj(E), mom.C[0]))
    Bm[np.diag_indices(state.K)] = float(config.M * config.N)
    return Bm, y


def amplitude_system(state: "MlState", z, moments: Optional[Moments] = None):
    """Return the (B, y) of the joint amplitude equations B a = y."""
    data, config = _unpack(z, None)
    return _amplitude_system_from(state, _moments_for(state, data, config, moments), config)


def _solve_amplitudes(Bm, y, max_condition):
    cond = np.linalg.cond(Bm)
    if not np.isfinite(cond) or cond > max_condition:
        raise AmplitudeSolveError(float(cond))
    return np.linalg.solve(Bm, y)


def update_amplitudes(state: "MlState", z, max_condition: float = 1e12,
                      moments: Optional[Moments] = None) -> np.ndarray:
    return _solve_amplitudes(*amplitude_system(state, z, moments), max_condition)


def _derivs_u(state, t: _Terms, config):
    m = np.arange(config.M, dtype=float)
    w = 2.0 * math.pi / config.wavelength
    a = state.a
    ES, ESu, ESuu = t.E * t.S, t.E * t.S_u, t.E * t.S_uu
    f = 2.0 * w * a * (ES.imag @ m) - 2.0 * a * ESu.real.sum(axis=1)
    fp = (
        2.0 * w * w * a * (ES.real @ (m * m))
        + 4.0 * w * a * (ESu.imag @ m)
        - 2.0 * a * ESuu.real.sum(axis=1)
    )
    return f, fp


def _derivs_r(state, t: _Terms):
    f = -2.0 * state.a * (t.E * t.S_r).real.sum(axis=1)
    fp = -2.0 * state.a * (t.E * t.S_rr).real.sum(axis=1)
    return f, fp


def derivatives_u(state: "MlState", z, k: int, moments: Optional[Moments] = None):
    """(f_u, f_u'): first and second derivative of the cost in u_k."""
    data, config = _unpack(z, None)
    t = _all_terms(state, _moments_for(state, data, config, moments), config)
    f, fp = _derivs_u(state, t, config)
    return float(f[k]), float(fp[k])


def derivatives_r(state: "MlState", z, k: int, moments: Optional[Moments] = None):
    """(f_r, f_r'): first and second derivative of the cost in r_k."""
    data, config = _unpack(z, None)
    t = _all_terms(state, _moments_for(state, data, config, moments), config)
    f, fp = _derivs_r(state, t)
    return float(f[k]), float(fp[k])


def _guarded_steps(f, fp, max_step: float, guard: bool, what: str) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    fp = np.asarray(fp, dtype=float)
    bad = ~(np.isfinite(f) & np.isfinite(fp))
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise NonFiniteDerivative(
            f"non-finite derivative in {what} of target {k}: f={f[k]}, f'={fp[k]}"
        )
    positive = fp > 0
    step = np.where(positive, -f / np.where(positive, fp, 1.0), 0.0)
    if guard:
        # wrong curvature for a minimum: clamped descent step
        step = np.where(positive, step, -np.sign(f) * max_step)
    else:
        nz = fp != 0
        step = np.where(positive | ~nz, step, -f / np.where(nz, fp, 1.0))
    return np.clip(step, -max_step, max_step)


def _guarded_step(f: float, fp: float, max_step: float, guard: bool, what: str) -> float:
    return float(_guarded_steps([f], [fp], max_step, guard, what)[0])


def _u_max_step(settings: "MlSettings", config: RadarConfig) -> float:
    # one native angle bin spans lambda/M in u
    return settings.newton_max_step * config.wavelength / config.M


def _r_max_step(settings: "MlSettings", config: RadarConfig) -> float:
    return settings.newton_max_step * config.range_resolution


def newton_step_u(state: "MlState", z, k: int, settings: Optional["MlSettings"] = None,
                  moments: Optional[Moments] = None) -> float:
    settings = settings or MlSettings()
    config = z.config
    f, fp = derivatives_u(state, z, k, moments)
    step = _guarded_step(f, fp, _u_max_step(settings, config), settings.hessian_guard,
                         f"u update at iteration {state.iteration}")
    return float(np.clip(state.u[k] + step, -config.d, config.d))


def newton_step_r(state: "MlState", z, k: int, settings: Optional["MlSettings"] = None,
                  moments: Optional[Moments] = None) -> float:
    settings = settings or MlSettings()
    config = z.config
    f, fp = derivatives_r(state, z, k, moments)
    step = _guarded_step(f, fp, _r_max_step(settings, config), settings.hessian_guard,
                         f"r update at iteration {state.iteration}")
    return float(np.clip(state.r[k] + step, 0.0, config.max_range))


def _normalise_signs(state: MlState):
    neg = state.a < 0
    if np.any(neg):
        state.a[neg] = -state.a[neg]
        state.psi[neg] += math.pi
    state.psi[:] = np.angle(np.exp(1j * state.psi))
    # np.angle lands in (-pi, pi]
    state.psi[state.psi == -math.pi] = math.pi


# --------------------------------------------------------------------------
# Algorithm driver


def initial_state(z: MeasurementMatrix, K: int, init: Optional[Sequence[TargetEstimate]] = None,
                  max_condition: float = 1e12) -> MlState:
    """Coarse (r, u) from the native N x M grid (or ``init``), then psi and a."""
    config = z.config
    if init is None:
        from .spectral import native_grid_peaks

        peaks = native_grid_peaks(z, K)
        r0 = np.array([config.bin_to_range(p.n_p) for p in peaks], dtype=float)
        u0 = np.array(
            [config.wavelength * _signed_bin(p.m_p, config.M) / config.M for p in peaks],
            dtype=float,
        )
    else:
        if len(init) != K:
            raise ValueError(f"init has {len(init)} entries, expected K={K}")
        r0 = np.array([e.r for e in init], dtype=float)
        u0 = np.array([config.d * math.sin(e.theta) for e in init], dtype=float)
    u0 = np.clip(u0, -config.d, config.d)
    # phase from the data correlation only, then joint amplitudes
    state = MlState(np.zeros(K), np.zeros(K), r0, u0)
    mom = compute_moments(z.data, config, r0, u0)
    m = np.arange(config.M)
    steer = np.exp(2j * math.pi * u0[:, None] / config.wavelength * m)
    state.psi = -np.angle(np.sum(steer * mom.T[0], axis=1))
    state.a = _solve_amplitudes(*_amplitude_system_from(state, mom, config), max_condition)
    _normalise_signs(state)
    state.likelihood = _likelihood_from(state, mom, config)
    return state


def _signed_bin(m_p: float, M: int) -> float:
    return m_p - M if m_p >= M / 2 else m_p


def iterate_once(state: MlState, z: MeasurementMatrix, settings: MlSettings,
                 moments: Optional[Moments] = None) -> Moments:
    """One iteration; returns the correlation moments at the updated (r, u).

    All correlations come from the current (r, u). Phases are then updated
    target by target, amplitudes jointly, and u and r by one Newton step each
    for every target, with the interference terms rebuilt from the freshly
    updated phases and amplitudes.
    """
    config = z.config
    mom = _moments_for(state, z.data, config, moments)
    m = np.arange(config.M)
    w = state.a[:, None] * np.conj(_phasors(state, config))
    for k in range(state.K):
        D0k = mom.T[0][k] - np.einsum("lm,lm->m", mom.C[0][k], w)
        new = _psi_from(state, mom, config, k, D0k)
        if new is not None:
            state.psi[k] = new
            w[k] = state.a[k] * np.exp(
                -1j * (new + 2.0 * math.pi * state.u[k] / config.wavelength * m)
            )
    state.a = _solve_amplitudes(*_amplitude_system_from(state, mom, config),
                                settings.max_condition)
    _normalise_signs(state)
    t = _all_terms(state, mom, config)
    fu, fup = _derivs_u(state, t, config)
    fr, frp = _derivs_r(state, t)
    what = f"iteration {state.iteration}"
    du = _guarded_steps(fu, fup, _u_max_step(settings, config), settings.hessian_guard,
                        "u update at " + what)
    dr = _guarded_steps(fr, frp, _r_max_step(settings, config), settings.hessian_guard,
                        "r update at " + what)
    state.u = np.clip(state.u + du, -config.d, config.d)
    state.r = np.clip(state.r + dr, 0.0, config.max_range)
    state.iteration += 1
    mom = compute_moments(z.data, config, state.r, state.u)
    state.likelihood = _likelihood_from(state, mom, config)
    return mom


def estimate(
    z: MeasurementMatrix,
    K: int,
    settings: Optional[MlSettings] = None,
    init: Optional[Sequence[TargetEstimate]] = None,
    keep_trace: bool = False,
) -> MlResult:
    if K < 1:
        raise ValueError("K must be >= 1")
    settings = settings or MlSettings()
    state = initial_state(z, K, init, settings.max_condition)
    history = [state.likelihood]
    trace = [state.copy()] if keep_trace else []
    delta = settings.delta * abs(history[0]) if settings.relative_delta else settings.delta
    if delta == 0:
        delta = settings.delta
    converged = False
    mom = None
    for _ in range(settings.max_iters):
        mom = iterate_once(state, z, settings, mom)
        history.append(state.likelihood)
        if keep_trace:
            trace.append(state.copy())
        if abs(history[-1] - history[-2]) < delta:
            converged = True
            break
    if not converged:
        log.warning("MLE did not converge in %d iterations", settings.max_iters)
    config = z.config
    estimates = [
        TargetEstimate(
            a=float(state.a[k]),
            psi=float(state.psi[k]),
            r=float(state.r[k]),
            theta=float(config.u_to_angle(state.u[k])),
            u=float(state.u[k]),
        )
        for k in range(K)
    ]
    return MlResult(estimates, state, state.iteration, state.likelihood, converged, history, trace)
