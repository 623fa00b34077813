import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitrap import detection, dynamics
from levitrap.constants import K_B
from levitrap.detection import IntensityProfile, ResolutionError
from levitrap.traces import FitError, TimeTrace


def quadrature_profile(x, i0, z0, w, a, b, c, n=20001):
    """Independent oracle: integrate over the oscillation phase directly."""
    th = np.linspace(-math.pi / 2, math.pi / 2, n)
    u = a * np.sin(th)
    g = np.exp(-2 * (x[:, None] - z0 - u[None, :]) ** 2 / w**2) * (1 + b * u[None, :])
    return i0 * np.trapezoid(g, th, axis=1) + c


@pytest.mark.parametrize("a,w,b", [(74.5, 8.2, 1e-3), (20.0, 4.0, 0.0), (5.0, 10.0, -2e-3),
                                   (150.0, 6.0, 5e-4)])
def test_profile_model_matches_quadrature(a, w, b):
    x = np.arange(0.0, 2 * a + 12 * w + 20)
    z0 = x.size / 2 + 0.3
    got = detection.profile_model(0.0, x.size, 1.0, 2.1, z0, w, a, b, 0.1)
    want = quadrature_profile(x, 2.1, z0, w, a, b, 0.1)
    # first-order in-cell blur correction is good to a few 1e-4 of the peak
    assert np.max(np.abs(got - want)) < 1e-3 * np.max(want)


# 5 amplitudes x 4 widths: the 20-point self-inversion grid
GRID = [(a, w) for a in (6.0, 15.0, 40.0, 74.5, 160.0) for w in (4.0, 6.0, 8.2, 12.0)]


@pytest.mark.parametrize("a,w", GRID)
def test_fit_inverts_render(a, w):
    truth = dict(I0=2.1, z0=0.0, w=w, a=a, b=1e-3, c=0.106)
    n = int(math.ceil(2 * a + 12 * w)) + 20
    truth["z0"] = n / 2 + 0.37
    prof = detection.render_profile(a, truth["z0"], truth["I0"], w, truth["b"], truth["c"], n)
    fit = detection.fit_profile(prof)
    for k, v in fit.values.items():
        assert v == pytest.approx(truth[k], rel=0.01, abs=1e-5), k
    assert fit.d_model < 2 * fit.amp_a


@settings(max_examples=40, deadline=None)
@given(st.floats(1.0, 200.0), st.floats(4.0, 15.0), st.floats(-3e-3, 3e-3))
def test_model_peak_separation_below_twice_amplitude(a, w, b):
    d = detection.model_peak_separation((1.0, 0.0, w, a, b, 0.0))
    assert 0 <= d < 2 * a


def test_noisy_fit_recovers_amplitude():
    rng = np.random.default_rng(0)
    prof = detection.render_profile(74.5, 188.5, 2.1, 8.2, 1e-3, 0.106, 380)
    noisy = IntensityProfile(prof.intensities * (1 + 0.02 * rng.standard_normal(380)))
    fit = detection.fit_profile(noisy)
    assert fit.amp_a == pytest.approx(74.5, abs=5 * fit.sigmas["a"] + 0.05)
    assert fit.d_pf is not None and fit.peak_mismatch < 3.0


def test_camera_frame_reproduces_render():
    """A pure sinusoid imaged over whole periods equals the analytic profile."""
    f, a_m, pitch = 1.28e3, 74.5 * 2.7e-6, 2.7e-6
    dt = 1 / (f * 4000)
    t = np.arange(int(round(0.01 / dt))) * dt  # 12.8 periods
    z = a_m * np.sin(2 * math.pi * f * t)
    trace = TimeTrace(z, dt, "m")
    n, centre = 380, 190.0
    img = detection.camera_frame_from_trace(trace, 0.0, 10 / f, n, pitch, centre, 8.2,
                                            i0=2.1, offset_c=0.106)
    ref = detection.render_profile(74.5, centre, 2.1, 8.2, 0.0, 0.106, n)
    assert np.max(np.abs(img.intensities - ref.intensities)) < 0.01 * np.max(ref.intensities)


def test_resolution_guard():
    with pytest.raises(ResolutionError):
        detection.render_profile(50.0, 100.0, 1.0, 3.0, 0.0, 0.0, 200)


def test_flat_profile_fails_cleanly():
    with pytest.raises((FitError, ValueError)):
        detection.fit_profile(IntensityProfile(np.ones(100)))


def test_amplitude_uncertainty_skips_single_peak_fits():
    assert detection.amplitude_uncertainty([]) is None


# --- APD calibration ------------------------------------------------------------

def _ringup_variance(alpha, t_fb=1.0, gamma=2.0, t0=300.0, stiffness=1.0, n=200, dt=0.05,
                     t_switch=1.0):
    t = dt * np.arange(n) + dt / 2
    e = np.where(t < t_switch, t_fb / t0,
                 1 + (t_fb / t0 - 1) * np.exp(-gamma * np.clip(t - t_switch, 0, None)))
    var = alpha**2 * K_B * t0 / stiffness * e
    return TimeTrace(var, dt, "V2", dt / 2, "apd_variance")


def test_calibration_recovers_gain_and_temperature():
    stiffness = 4.3e-17 * (2 * math.pi * 1.28e3) ** 2
    var = _ringup_variance(1e5, stiffness=stiffness)
    cal, fit = detection.calibrate_ringup(var, 1.0, stiffness=stiffness)
    assert cal.alpha == pytest.approx(1e5, rel=1e-6)
    assert fit.value("T_fb") == pytest.approx(1.0, rel=1e-6)
    assert fit.value("gamma") == pytest.approx(2.0, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e2, 1e7), st.floats(0.1, 10.0))
def test_energy_scale_independent_of_gain(alpha, rescale):
    """Energies in k_B T0 do not depend on the detector gain."""
    var = _ringup_variance(alpha)
    cal, _ = detection.calibrate_ringup(var, 1.0)
    e = detection.variance_to_energy(var.values, cal)
    var2 = var.with_values(var.values * rescale)
    cal2, _ = detection.calibrate_ringup(var2, 1.0)
    e2 = detection.variance_to_energy(var2.values, cal2)
    np.testing.assert_allclose(e, e2, rtol=1e-6)
    assert e[-1] == pytest.approx(1.0, rel=1e-3)


def test_rescale_factor_and_energy_correction():
    r = detection.rescale_factor(5.49, 1.0)
    assert r == pytest.approx(30.1401)
    cal = detection.ApdCalibration(1e5, 2.0)
    assert detection.variance_to_energy(1.0, cal.with_rescale(r)) == pytest.approx(r / 2)
    with pytest.raises(ValueError):
        detection.rescale_factor(0, 1)


def test_drive_tone_amplitude():
    dt = 1 / 20480
    t = np.arange(20480) * dt
    tr = TimeTrace(0.3 * np.sin(2 * math.pi * 800.0 * t) + 0.01 * np.sin(2 * math.pi * 1280 * t),
                   dt, "V")
    assert detection.drive_tone_amplitude(tr, 800.0) == pytest.approx(0.3, rel=1e-3)


def test_apd_noise_level():
    n, dt = 200000, 1e-4
    tr = TimeTrace(np.zeros(n), dt, "m")
    u = detection.apd_trace(tr, 1e5, 1e-6, dynamics.derive_rng(0, 0, 2))
    # one-sided PSD S over the band fs/2 gives variance S fs / 2
    assert np.var(u.values) == pytest.approx(1e-6 / dt / 2, rel=0.02)


def test_camera_amplitude_errors():
    rng = np.random.default_rng(1)
    sq = np.full(200000, (200e-6) ** 2)
    meas = np.sqrt(detection.camera_amplitudes(sq, 4e-6, rng))
    assert np.std(meas) == pytest.approx(4e-6, rel=0.01)
    hit = np.sqrt(detection.camera_amplitudes(sq, 4e-6, rng, excess_fraction=0.5,
                                              excess_scale=3.0))
    assert np.var(hit) == pytest.approx((0.5 + 0.5 * 9) * 16e-12, rel=0.02)
