import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rangeangle import mle
from rangeangle.mle import (
    AmplitudeSolveError, MlSettings, MlState, NonFiniteDerivative, amplitude_system,
    corr_cross, corr_single, derivatives_r, derivatives_u, estimate, geometric_moments,
    interference_cancelled_corr, likelihood, newton_step_r, update_amplitudes, update_psi,
)
from rangeangle.radar import (
    MeasurementMatrix, Target, TargetEstimate, sigma_from_snr, synthesize_measurement,
)


def model(cfg, a, psi, r, u):
    """Noiseless measurement built directly from (a, psi, r, u) per target."""
    n = np.arange(cfg.N)[:, None]
    m = np.arange(cfg.M)[None, :]
    z = np.zeros((cfg.N, cfg.M), dtype=complex)
    for ak, pk, rk, uk in zip(a, psi, r, u):
        z += ak * np.exp(1j * (pk + 2 * math.pi * uk / cfg.wavelength * m
                               + cfg.kappa * (2 * rk + m * uk) * n))
    return MeasurementMatrix(z, cfg)


def truth_state(cfg, targets):
    return MlState([t.a for t in targets], [t.psi(cfg) for t in targets],
                   [t.r for t in targets], [t.u(cfg) for t in targets])


def random_state(cfg, rng, K=2):
    """A state scattered around two well separated targets."""
    r = np.array([5.0, 7.3])[:K] + rng.uniform(-0.3, 0.3, K) * cfg.range_resolution
    u = np.array([0.26, -0.4])[:K] * cfg.d + rng.uniform(-0.3, 0.3, K) * cfg.wavelength / cfg.M
    return MlState(rng.uniform(0.5, 1.5, K), rng.uniform(-math.pi, math.pi, K), r, u)


@pytest.fixture(scope="module")
def noisy_pair(cfg):
    targets = [Target(1.0, 0.4, 5.0, math.asin(0.26)), Target(0.8, 2.0, 7.3, math.asin(-0.4))]
    return synthesize_measurement(cfg, targets, sigma_from_snr(20.0, 1.0, cfg.P), seed=11)


# --------------------------------------------------------------------------
# correlation sums


def test_corr_single_matched(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    u = single_target.u(cfg)
    R = corr_single(z, single_target.r, u)
    m = np.arange(cfg.M)
    expected = single_target.a * np.exp(-1j * single_target.psi(cfg)) * np.exp(
        -2j * math.pi * u / cfg.wavelength * m) * cfg.N
    assert np.allclose(R, expected, rtol=1e-9, atol=0)


def test_corr_single_integer_bin_null(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    R = corr_single(z, single_target.r + cfg.range_resolution, single_target.u(cfg), m=0)
    assert abs(R) < 1e-9 * single_target.a * cfg.N


def test_corr_single_extended_precision(cfg, rng):
    data = rng.standard_normal((cfg.N, cfg.M)) + 1j * rng.standard_normal((cfg.N, cfg.M))
    r, u = 4.321, 0.37 * cfg.d
    mpmath.mp.dps = 40
    for m in (0, 7, 15):
        beta = mpmath.mpf(cfg.kappa) * (2 * mpmath.mpf(r) + m * mpmath.mpf(u))
        ref = mpmath.fsum(mpmath.conj(mpmath.mpc(complex(data[n, m]))) * mpmath.expj(beta * n)
                          for n in range(cfg.N))
        got = corr_single(data, r, u, m=m, config=cfg)
        assert abs(got - complex(ref)) / abs(complex(ref)) < 1e-12


def test_corr_single_needs_config_for_raw_arrays(cfg):
    with pytest.raises(ValueError):
        corr_single(np.zeros((cfg.N, cfg.M)), 1.0, 0.0)


def test_corr_cross_coincident_is_n(cfg):
    assert corr_cross(5.0, 0.001, 5.0, 0.001, 9, cfg) == cfg.N


def test_corr_cross_full_cycle(cfg):
    dr = 3 * cfg.range_resolution
    for m in (0, 4, 15):
        assert abs(corr_cross(5.0 + dr, 0.0007, 5.0, 0.0007, m, cfg)) < 1e-9 * cfg.N


def test_corr_cross_direct_sum(cfg, rng):
    mpmath.mp.dps = 40
    for _ in range(5):
        rk, rl = rng.uniform(1, 9, 2)
        uk, ul = rng.uniform(-cfg.d, cfg.d, 2)
        m = int(rng.integers(cfg.M))
        alpha = mpmath.mpf(cfg.kappa) * (2 * (mpmath.mpf(rk) - mpmath.mpf(rl))
                                         + m * (mpmath.mpf(uk) - mpmath.mpf(ul)))
        ref = complex(mpmath.fsum(mpmath.expj(alpha * n) for n in range(cfg.N)))
        got = corr_cross(rk, uk, rl, ul, m, cfg)
        assert abs(got - ref) / abs(ref) < 1e-12


@given(st.floats(-math.pi, math.pi, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_geometric_moments_direct(alpha):
    n = np.arange(256, dtype=np.longdouble)
    e = np.exp(1j * alpha * n.astype(float))
    ref = [np.sum(e), np.sum(n.astype(float) * e), np.sum(n.astype(float) ** 2 * e)]
    got = geometric_moments(alpha, 256)
    for p in range(3):
        scale = float(np.sum(n ** p))
        assert abs(complex(got[p]) - ref[p]) < 1e-10 * scale


# --------------------------------------------------------------------------
# phase and amplitude updates


def test_update_psi_matched(cfg):
    u = 0.3 * cfg.d
    z = model(cfg, [1.3], [0.7], [5.0], [u])
    state = MlState([1.3], [0.0], [5.0], [u])
    assert update_psi(state, z, 0) == pytest.approx(0.7, abs=1e-9)


def test_update_psi_phase_equivariance(cfg):
    u = -0.2 * cfg.d
    z = model(cfg, [1.0], [0.1], [3.0], [u])
    state = MlState([1.0], [0.0], [3.0], [u])
    base = update_psi(state, z, 0)
    alpha = 1.234
    shifted = update_psi(state, MeasurementMatrix(z.data * np.exp(1j * alpha), cfg), 0)
    assert np.angle(np.exp(1j * (shifted - base - alpha))) == pytest.approx(0.0, abs=1e-12)


def test_update_psi_is_stationary_k2(cfg, two_targets):
    z = synthesize_measurement(cfg, two_targets, 0.0)
    state = truth_state(cfg, two_targets)
    state.psi[0] += 0.5
    state.psi[0] = update_psi(state, z, 0)
    h = 1e-6

    def lam(p):
        s = state.copy()
        s.psi[0] = p
        return likelihood(s, z)

    grad = (lam(state.psi[0] + h) - lam(state.psi[0] - h)) / (2 * h)
    curv = (lam(state.psi[0] + 1e-3) - 2 * lam(state.psi[0]) + lam(state.psi[0] - 1e-3)) / 1e-6
    assert curv > 0
    assert abs(grad) < 1e-6 * cfg.M * cfg.N


def test_update_psi_degenerate_keeps_previous(cfg):
    z = MeasurementMatrix(np.zeros((cfg.N, cfg.M), dtype=complex), cfg)
    state = MlState([1.0], [0.4], [5.0], [0.0])
    assert update_psi(state, z, 0) == 0.4
    assert state.notes


def test_amplitude_single_target_matched_filter(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.05, seed=2)
    state = truth_state(cfg, [single_target])
    B, y = amplitude_system(state, z)
    assert update_amplitudes(state, z)[0] == pytest.approx(y[0] / (cfg.M * cfg.N))


def test_amplitudes_round_trip(cfg):
    targets = [Target(1.0, 0.3, 5.0, 0.2), Target(0.5, -1.0, 5.2, -0.3)]
    z = synthesize_measurement(cfg, targets, 0.0)
    a = update_amplitudes(truth_state(cfg, targets), z)
    assert np.allclose(a, [1.0, 0.5], atol=1e-9, rtol=0)


def test_amplitude_matrix_structure(cfg, two_targets):
    z = synthesize_measurement(cfg, two_targets, 0.0)
    B, _ = amplitude_system(truth_state(cfg, two_targets), z)
    assert np.all(np.diag(B) == 4096)
    assert np.allclose(B, B.T)


def test_amplitude_solve_rejects_coincident_targets(cfg):
    z = synthesize_measurement(cfg, [Target(1.0, 0.0, 5.0, 0.1)], 0.0)
    state = MlState([1.0, 1.0], [0.0, 0.0], [5.0, 5.0], [0.001, 0.001])
    with pytest.raises(AmplitudeSolveError) as exc:
        update_amplitudes(state, z)
    assert exc.value.cond > 1e12


# --------------------------------------------------------------------------
# derivatives and Newton steps


def test_stationary_at_truth(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    state = truth_state(cfg, [single_target])
    fu, fup = derivatives_u(state, z, 0)
    fr, frp = derivatives_r(state, z, 0)
    assert abs(fu) < 1e-6 * abs(fup) * cfg.wavelength
    assert abs(fr) < 1e-6 * abs(frp) * cfg.range_resolution
    dpsi = np.angle(np.exp(1j * (update_psi(state, z, 0) - state.psi[0])))
    assert abs(dpsi) < 1e-9
    assert update_amplitudes(state, z)[0] == pytest.approx(single_target.a, rel=1e-9)


def _fd(z, state, k, attr, h):
    def lam(dv):
        s = state.copy()
        getattr(s, attr)[k] += dv
        return likelihood(s, z)

    l0 = lam(0.0)
    lp, lm = lam(h), lam(-h)
    return (lp - lm) / (2 * h), (lp - 2 * l0 + lm) / h**2


@pytest.mark.parametrize("seed", range(20))
def test_first_derivatives_match_finite_differences(cfg, noisy_pair, seed):
    state = random_state(cfg, np.random.default_rng(seed))
    for k in range(2):
        fu, _ = derivatives_u(state, noisy_pair, k)
        fd_u, _ = _fd(noisy_pair, state, k, "u", 1e-7 * cfg.wavelength)
        assert abs(fu - fd_u) / abs(fd_u) < 1e-4
        fr, _ = derivatives_r(state, noisy_pair, k)
        fd_r, _ = _fd(noisy_pair, state, k, "r", 1e-6)
        assert abs(fr - fd_r) / abs(fd_r) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_second_derivatives_match_finite_differences(cfg, noisy_pair, seed):
    state = random_state(cfg, np.random.default_rng(seed))
    for k in range(2):
        _, fup = derivatives_u(state, noisy_pair, k)
        _, fd_uu = _fd(noisy_pair, state, k, "u", 1e-5 * cfg.wavelength)
        assert abs(fup - fd_uu) / abs(fd_uu) < 1e-3
        _, frp = derivatives_r(state, noisy_pair, k)
        _, fd_rr = _fd(noisy_pair, state, k, "r", 1e-5)
        assert abs(frp - fd_rr) / abs(fd_rr) < 1e-2


def test_newton_r_step_contracts(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    state = truth_state(cfg, [single_target])
    state.r[0] += 0.1 * cfg.range_resolution
    new = newton_step_r(state, z, 0)
    assert abs(new - single_target.r) * 10 <= 0.1 * cfg.range_resolution


def test_non_finite_derivative_raises():
    with pytest.raises(NonFiniteDerivative, match="target 1"):
        mle._guarded_steps([0.1, float("nan")], [1.0, 1.0], 0.1, True, "u update")


def test_guarded_step_wrong_curvature():
    # negative curvature: fixed descent step against the gradient
    assert mle._guarded_step(2.0, -1.0, 0.1, True, "t") == -0.1
    assert mle._guarded_step(-2.0, -1.0, 0.1, True, "t") == 0.1
    # Newton step is clamped
    assert mle._guarded_step(5.0, 1.0, 0.1, True, "t") == -0.1
    assert mle._guarded_step(0.01, 1.0, 0.1, True, "t") == pytest.approx(-0.01)


# --------------------------------------------------------------------------
# likelihood


def test_likelihood_empty_model(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.1, seed=1)
    assert likelihood(MlState([0.0, 0.0], [0.1, 0.2], [4.0, 5.0], [0.0, 0.001]), z) == 0.0


def test_likelihood_at_truth(cfg, single_target):
    a = 1.7
    t = Target(a, single_target.phi, single_target.r, single_target.theta)
    z = synthesize_measurement(cfg, [t], 0.0)
    assert likelihood(truth_state(cfg, [t]), z) == pytest.approx(-cfg.M * cfg.N * a * a,
                                                                 rel=1e-12)


def test_likelihood_equals_residual_energy_difference(cfg, noisy_pair):
    state = random_state(cfg, np.random.default_rng(3))
    s = model(cfg, state.a, state.psi, state.r, state.u).data
    z = noisy_pair.data
    ref = np.sum(np.abs(z - s) ** 2) - np.sum(np.abs(z) ** 2)
    assert likelihood(state, noisy_pair) == pytest.approx(ref, rel=1e-10)


def test_likelihood_monotone_over_iterations(cfg, two_targets):
    z = synthesize_measurement(cfg, two_targets, 0.0)
    res = estimate(z, 2)
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * abs(h[0]))


# --------------------------------------------------------------------------
# full estimator


def test_noiseless_single_target_consistency(cfg, single_target):
    res = estimate(synthesize_measurement(cfg, [single_target], 0.0), 1)
    e = res.estimates[0]
    assert res.converged and res.iterations <= 100
    assert abs(e.r - 5.0) < 1e-6
    assert abs(math.degrees(e.theta) - 15.0) < 1e-5


def test_noiseless_two_target_consistency(cfg, two_targets):
    res = estimate(synthesize_measurement(cfg, two_targets, 0.0), 2)
    assert res.converged and res.iterations <= 100
    ests = sorted(res.estimates, key=lambda e: e.theta)
    for e, deg in zip(ests, (-15.0, 15.0)):
        assert abs(e.r - 5.0) < 1e-6
        assert abs(math.degrees(e.theta) - deg) < 1e-5


def test_interference_cancellation(cfg, two_targets):
    z = synthesize_measurement(cfg, two_targets, 0.0)
    state = truth_state(cfg, two_targets)
    for k, t in enumerate(two_targets):
        S = interference_cancelled_corr(state, z, k)
        alone = corr_single(synthesize_measurement(cfg, [t], 0.0), t.r, t.u(cfg))
        assert np.max(np.abs(S - alone)) / np.max(np.abs(alone)) < 1e-9


def test_basin_one_bin_off(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    init = [TargetEstimate(1.0, 0.0, 5.0 + cfg.range_resolution, single_target.theta,
                           single_target.u(cfg), 1.0)]
    e = estimate(z, 1, init=init).estimates[0]
    assert abs(e.r - 5.0) < 1e-6
    assert abs(math.degrees(e.theta) - 15.0) < 1e-5


def test_permutation_equivariance(cfg, noisy_pair):
    seeds = [TargetEstimate(1.0, 0.0, 5.0, math.asin(0.25), 0.0, 1.0),
             TargetEstimate(1.0, 0.0, 7.3, math.asin(-0.41), 0.0, 1.0)]
    a = estimate(noisy_pair, 2, init=seeds)
    b = estimate(noisy_pair, 2, init=seeds[::-1])
    # identical up to summation order, which differs once targets are swapped
    assert a.iterations == b.iterations
    for ea, eb in zip(a.estimates, b.estimates[::-1]):
        assert ea.r == pytest.approx(eb.r, abs=1e-9)
        assert ea.theta == pytest.approx(eb.theta, abs=1e-9)


def test_phase_and_u_ranges(cfg):
    rng = np.random.default_rng(5)
    for trial in range(5):
        t = [Target(1.0, rng.uniform(0, 2 * math.pi), 3.0, math.radians(rng.uniform(-60, 60)))]
        res = estimate(synthesize_measurement(cfg, t, 0.5, seed=trial), 1)
        assert np.all(res.state.psi > -math.pi) and np.all(res.state.psi <= math.pi)
        assert np.all(np.abs(res.state.u) <= cfg.d)


def test_non_convergence_is_flagged(cfg, noisy_pair, caplog):
    res = estimate(noisy_pair, 2, MlSettings(delta=1e-300, relative_delta=False, max_iters=3))
    assert not res.converged and res.iterations == 3
    assert len(res.estimates) == 2
    assert "did not converge" in caplog.text


def test_trace_csv(cfg, single_target, tmp_path):
    res = estimate(synthesize_measurement(cfg, [single_target], 0.0), 1, keep_trace=True)
    path = tmp_path / "trace.csv"
    res.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,likelihood,r_0,u_0,a_0,psi_0"
    assert len(lines) == res.iterations + 2
    with pytest.raises(ValueError):
        estimate(synthesize_measurement(cfg, [single_target], 0.0), 1).write_trace(path)


def test_settings_validation():
    with pytest.raises(ValueError):
        MlSettings(delta=0.0)
    with pytest.raises(ValueError):
        MlSettings(max_iters=0)


def test_rejects_bad_k(cfg, single_target):
    z = synthesize_measurement(cfg, [single_target], 0.0)
    with pytest.raises(ValueError):
        estimate(z, 0)
