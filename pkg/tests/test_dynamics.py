import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitrap import dynamics
from levitrap.constants import K_B
from levitrap.dynamics import (ConfigError, FeedbackConfig, OscState, SimConfig, Thermal,
                               Transition, UnsupportedRegimeError, Window)
from levitrap.physics import Environment, ParticleSpec

MASS = 4.3e-17
PART = ParticleSpec(MASS, 150e-9, 300, "dumbbell")
ENV = Environment()
OMEGA = ENV.omega


def _realify(R):
    """Real 2x2 matrix of multiplication by the complex number R."""
    return np.array([[R.real, -R.imag], [R.imag, R.real]])


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-6, 1e-3), st.floats(0.0, 50.0))
def test_transition_composes_exactly(dt, gamma):
    psd = 4 * K_B * 300 * MASS * max(gamma, 1e-3)
    one = Transition(dt, gamma, OMEGA, psd, MASS)
    two = Transition(2 * dt, gamma, OMEGA, psd, MASS)
    assert two.decay == pytest.approx(one.decay**2, rel=1e-10, abs=1e-14)
    R = _realify(one.decay)
    composed = R @ one.noise_cov @ R.T + one.noise_cov
    np.testing.assert_allclose(two.noise_cov, composed, rtol=1e-8,
                               atol=1e-12 * np.abs(composed).max())


def test_two_half_steps_match_one_step_in_distribution():
    dt, gamma = 2e-4, 5.0
    psd = 4 * K_B * 300 * MASS * gamma
    one, two = Transition(dt, gamma, OMEGA, psd, MASS), Transition(2 * dt, gamma, OMEGA, psd, MASS)
    rng = np.random.default_rng(3)
    n = 40000
    z0, v0 = 1e-7, 0.0
    zeta0 = one.to_mode(z0, v0)
    a = zeta0 * two.decay + two.noise(rng.standard_normal((n, 2)))
    b = (zeta0 * one.decay + one.noise(rng.standard_normal((n, 2)))) * one.decay \
        + one.noise(rng.standard_normal((n, 2)))
    za, va = two.from_mode(a)
    zb, vb = one.from_mode(b)
    for x, y in ((za, zb), (va, vb)):
        se = math.sqrt(x.var() / n + y.var() / n)
        assert abs(x.mean() - y.mean()) < 3 * se
    ca, cb = np.cov(za, va), np.cov(zb, vb)
    # standard error of a sample variance is about var * sqrt(2/n)
    tol = 3 * math.sqrt(2 / n) * np.sqrt(np.outer(np.diag(ca), np.diag(ca))) * math.sqrt(2)
    assert np.all(np.abs(ca - cb) < tol)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1e-6, 1e-6), st.floats(-1e-2, 1e-2), st.floats(0.0, 100.0),
       st.floats(1e-5, 1e-2))
def test_noise_free_step_matches_closed_form(z0, v0, gamma, dt):
    s = dynamics.exact_step(OscState(z0, v0), dt, gamma, OMEGA)
    a = gamma / 2
    wd = math.sqrt(OMEGA**2 - a**2)
    e = math.exp(-a * dt)
    z = e * (z0 * math.cos(wd * dt) + (v0 + a * z0) / wd * math.sin(wd * dt))
    scale = abs(z0) + abs(v0) / OMEGA + 1e-30
    assert s.z == pytest.approx(z, abs=1e-9 * scale)
    assert s.t == pytest.approx(dt)


def test_equipartition_over_long_run():
    gamma = 2 * math.pi * 20.0
    duration = 2e4 / gamma  # 10^4 amplitude correlation times (2/gamma each)
    cfg = SimConfig(PART, ENV, gamma=gamma, duration=duration, seed=11,
                    noise_sources=[Thermal(300.0)], initial_temperature=300.0)
    traj = dynamics.simulate_trajectory(cfg)
    expected = K_B * 300 / (MASS * OMEGA**2)
    assert np.mean(traj.z**2) == pytest.approx(expected, rel=0.02)
    assert np.mean(traj.v**2) == pytest.approx(K_B * 300 / MASS, rel=0.02)


def test_feedback_sets_mode_temperature():
    gamma, target = 2 * math.pi * 5.0, 30.0
    gain = dynamics.feedback_gain_for_temperature(target, 4 * K_B * 300 * MASS * gamma / (4 * MASS),
                                                  gamma)
    assert gain == pytest.approx(gamma * (300 / target - 1), rel=1e-9)
    cfg = SimConfig(PART, ENV, gamma=gamma, duration=2e4 / (gamma + gain), seed=5,
                    noise_sources=[Thermal(300.0)], feedback=FeedbackConfig(gain),
                    initial_temperature=target)
    traj = dynamics.simulate_trajectory(cfg)
    t_mode = np.mean(traj.energy()) / K_B
    assert t_mode == pytest.approx(target, rel=0.03)


def test_trajectory_is_deterministic_and_thread_independent():
    cfg = SimConfig(PART, ENV, gamma=1.0, duration=0.5, seed=42,
                    noise_sources=[Thermal(300.0)], initial_temperature=300.0)
    a = dynamics.simulate_trajectory(cfg, 3)
    b = dynamics.simulate_trajectory(cfg, 3)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.v, b.v)
    serial = dynamics.simulate_ensemble(cfg, 4, reduce=lambda t: t.z)
    threaded = dynamics.simulate_ensemble(cfg, 4, reduce=lambda t: t.z, workers=4)
    for x, y in zip(serial, threaded):
        assert np.array_equal(x, y)
    assert not np.array_equal(serial[0], serial[1])


def test_streams_are_independent():
    a = dynamics.derive_rng(1, 0, dynamics.STREAM_DYNAMICS).standard_normal(5)
    b = dynamics.derive_rng(1, 0, dynamics.STREAM_MEASUREMENT).standard_normal(5)
    c = dynamics.derive_rng(1, 1, dynamics.STREAM_DYNAMICS).standard_normal(5)
    assert not np.allclose(a, b) and not np.allclose(a, c)


def test_feedback_window_switches_damping():
    gamma, gain = 0.5, 200.0
    cfg = SimConfig(PART, ENV, gamma=gamma, duration=0.2, seed=0,
                    feedback=FeedbackConfig(gain), schedule=[Window("feedback", 0.0, 0.1)],
                    initial_state=OscState(1e-6, 0.0))
    tr = dynamics.simulate_trajectory(cfg)
    amp2 = tr.squared_amplitude()
    i = np.searchsorted(tr.t, 0.1)
    # exponential decay of the squared amplitude at gamma + gain, then gamma
    assert amp2[i] / amp2[0] == pytest.approx(math.exp(-(gamma + gain) * tr.t[i]), rel=0.02)
    j = tr.t.size - 1
    assert amp2[j] / amp2[i] == pytest.approx(math.exp(-gamma * (tr.t[j] - tr.t[i])), rel=0.02)


def test_illumination_mask_hides_dark_samples():
    cfg = SimConfig(PART, ENV, gamma=1.0, duration=1.0, seed=0, noise_sources=[Thermal(300.0)],
                    schedule=dynamics.stroboscopic_windows(0.1, 0.5, stop=1.0))
    tr = dynamics.simulate_trajectory(cfg)
    lit = tr.illuminated
    assert lit[tr.t < 0.1].all() and not lit[(tr.t > 0.15) & (tr.t < 0.45)].any()
    e = dynamics.energy_series(tr.position(), 0.05, MASS, OMEGA)
    assert np.isnan(e.values[~e.mask()]).all()


def test_invalid_configs_are_rejected():
    with pytest.raises(ConfigError):
        SimConfig(PART, ENV, gamma=1.0, schedule=[Window("feedback", 0, 1)])
    with pytest.raises(ConfigError):
        SimConfig(PART, ENV, gamma=1.0, feedback=FeedbackConfig(1.0),
                  schedule=[Window("feedback", 0, 1), Window("feedback", 0.5, 2)])
    with pytest.raises(UnsupportedRegimeError):
        Transition(1e-4, 3 * OMEGA, OMEGA)
    with pytest.raises(ValueError):
        OscState(float("nan"), 0.0)
