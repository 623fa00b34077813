import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from levitrap import dynamics, physics, protocols, spectral
from levitrap.spectral import FrequencySeries
from levitrap.traces import TimeTrace

FZ = 1.28e3


def allan_oracle(f, m, fz):
    """Plain-loop non-overlapping Allan deviation at block length m."""
    nb = len(f) // m
    means = [sum(f[k * m:(k + 1) * m]) / m for k in range(nb)]
    s = sum((means[k] - means[k - 1]) ** 2 for k in range(1, nb))
    return math.sqrt(s / (2 * fz**2 * (nb - 1)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=8, max_size=60), st.integers(1, 4))
def test_allan_matches_loop_oracle(offsets, m):
    f = [FZ + x for x in offsets]
    if len(f) // m < 2:
        return
    res = spectral.allan_deviation(np.array(f), [m * 0.1], dt=0.1, f_nominal=FZ)
    assert res.sigma[0] == pytest.approx(allan_oracle(f, m, FZ), rel=1e-9, abs=1e-15)


def test_allan_constant_frequency_is_exactly_zero():
    res = spectral.allan_deviation(np.full(1000, FZ), [0.1, 1.0, 10.0], dt=0.1, f_nominal=FZ)
    assert np.all(res.sigma == 0.0)


def _slope(res):
    return np.polyfit(np.log(res.taus), np.log(res.sigma), 1)[0]


def test_white_fm_slope():
    rng = np.random.default_rng(0)
    s = spectral.synthetic_frequency_noise(200000, 0.1, FZ, rng, white=1e-5)
    res = spectral.allan_deviation(s, np.geomspace(0.2, 500, 15))
    assert _slope(res) == pytest.approx(-0.5, abs=0.05)
    assert res.sigma[0] == pytest.approx(1e-5 / math.sqrt(0.2), rel=0.05)


def test_random_walk_fm_slope():
    rng = np.random.default_rng(1)
    s = spectral.synthetic_frequency_noise(200000, 0.1, FZ, rng, random_walk=1e-6)
    res = spectral.allan_deviation(s, np.geomspace(1, 1000, 12))
    assert _slope(res) == pytest.approx(0.5, abs=0.07)
    assert res.sigma[4] == pytest.approx(1e-6 * math.sqrt(res.taus[4]), rel=0.15)


def test_allan_skips_and_reports_long_taus():
    res = spectral.allan_deviation(np.full(10, FZ), [0.1, 1.0, 5.0], dt=0.1, f_nominal=FZ)
    assert res.taus.tolist() == [0.1] and len(res.skipped) == 2


def test_allan_gaps_break_chain():
    f = FZ + np.arange(20.0)
    valid = np.ones(20, bool)
    valid[5] = False
    s = FrequencySeries(0.1 * np.arange(20), f, FZ, valid)
    full = spectral.allan_deviation(FrequencySeries(s.times, f, FZ), [0.1])
    gappy = spectral.allan_deviation(s, [0.1])
    assert gappy.n_intervals[0] == full.n_intervals[0] - 2
    # every consecutive difference is 1 Hz either way
    assert gappy.sigma[0] == pytest.approx(full.sigma[0])


def test_drift_fit_exact():
    t = np.arange(100.0)
    s = FrequencySeries(t, FZ + 3e-3 * t, FZ)
    est = spectral.drift_fit(s)
    assert est.value == pytest.approx(3e-3, rel=1e-12) and est.sigma < 1e-12


def test_pll_recovers_chirp():
    series, drift = protocols.chirp_experiment(rate=8e-8, duration=600.0, seed=3)
    assert drift.value == pytest.approx(8e-8, rel=0.2)
    assert np.all(series.valid)


def test_drift_sigma_matches_scatter_for_pll_output():
    est = [protocols.chirp_experiment(noise_psd=1e-6, seed=s)[1] for s in range(20)]
    v = np.array([e.value for e in est])
    assert abs(v.mean() - 8e-8) < 3 * v.std(ddof=1) / math.sqrt(v.size)
    assert np.median([e.sigma for e in est]) == pytest.approx(v.std(ddof=1), rel=0.4)


def test_drift_reduces_to_least_squares_for_white_frequency_noise():
    rng = np.random.default_rng(0)
    t = np.arange(2000) * 0.1
    est = spectral.drift_fit(FrequencySeries(t, FZ + 1e-3 * t + 0.01 * rng.standard_normal(t.size),
                                             FZ))
    ols = 0.01 / math.sqrt(np.sum((t - t.mean()) ** 2))
    assert est.value == pytest.approx(1e-3, abs=4 * ols)
    assert est.sigma == pytest.approx(ols, rel=0.15)


def test_drift_bridges_invalid_stretches():
    series, full = protocols.chirp_experiment(noise_psd=1e-6, seed=3)
    valid = series.valid.copy()
    valid[1000:1200] = False
    valid[3000:3010] = False
    gapped = spectral.drift_fit(FrequencySeries(series.times, series.frequencies, FZ, valid))
    assert gapped.value == pytest.approx(full.value, abs=3 * gapped.sigma)
    assert gapped.sigma >= full.sigma


def test_pll_tracks_constant_offset():
    tr = protocols.chirp_trace(rate=0.0, duration=20.0, f_z=FZ + 0.37)
    s = spectral.pll_extract(tr, FZ, 5.0)
    np.testing.assert_allclose(s.frequencies, FZ + 0.37, atol=1e-6)


def test_pll_flags_low_amplitude():
    tr = protocols.chirp_trace(rate=0.0, duration=20.0)
    dark = tr.with_values(np.where(tr.times > 10, 0.0, tr.values))
    s = spectral.pll_extract(dark, FZ, 5.0, amplitude_threshold=0.5)
    assert s.valid[s.times < 9].all() and not s.valid[s.times > 11].any()


def test_pll_noise_respects_cramer_rao_bound():
    """Record-mean frequency scatter: above the bound, at the filter-noise prediction."""
    S, T, A = 1e-4, 60.0, 1.0
    means = []
    for seed in range(30):
        tr = protocols.chirp_trace(rate=0.0, duration=T, amplitude=A, noise_psd=S, seed=seed)
        s = spectral.pll_extract(tr, FZ, 5.0)
        means.append(np.mean(s.frequencies[s.valid]))
    fs = tr.sample_rate
    span = s.times[-1] - s.times[0] + (s.times[1] - s.times[0])
    n = span * fs
    crlb = math.sqrt(24 * (S * fs / 2) / (A**2 * n * (n**2 - 1))) * fs / (2 * math.pi)
    # endpoint-phase estimator: phase noise S pi f_c / (2 A^2) after the filters
    pred = math.sqrt(2 * S * math.pi * 5.0 / (2 * A**2)) / (2 * math.pi * span)
    got = np.std(means, ddof=1)
    assert got > crlb
    assert 0.6 < got / pred < 1.4


def test_pll_rejects_bad_sampling():
    tr = TimeTrace(np.zeros(1000), 1 / 3000, "V")
    with pytest.raises(ValueError):
        spectral.pll_extract(tr, FZ)


def test_psd_integrates_to_variance():
    rng = np.random.default_rng(5)
    dt = 1e-3
    x = rng.standard_normal(2**16)
    f, p = spectral.psd(TimeTrace(x, dt, "m"), 1.0)
    assert np.trapezoid(p, f) == pytest.approx(np.var(x), rel=0.02)
    # white noise of unit variance has one-sided level 2 dt
    assert np.median(p[1:-1]) == pytest.approx(2 * dt, rel=0.1)


def test_psd_refuses_gappy_trace():
    tr = TimeTrace(np.zeros(100), 0.1, "m", valid=np.r_[np.ones(50), np.zeros(50)].astype(bool))
    with pytest.raises(ValueError):
        spectral.psd(tr, 1.0)


def test_synthetic_noise_allan_minimum():
    out = protocols.allan_experiment(seed=12345)
    tau, sig = out.allan.minimum()
    assert sig == pytest.approx(2e-6, rel=0.1)
    assert tau == pytest.approx(20, rel=0.3)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=20, max_size=80), st.floats(-50.0, 50.0))
def test_allan_is_invariant_under_a_constant_shift(offsets, shift):
    # dyadic offsets keep every sum exact, so the invariance holds bit for bit
    f = FZ + np.round(np.array(offsets) * 2**10) / 2**10
    shift = round(shift * 2**4) / 2**4
    a = spectral.allan_deviation(f, [0.1, 0.2, 0.4], dt=0.1, f_nominal=FZ)
    b = spectral.allan_deviation(f + shift, [0.1, 0.2, 0.4], dt=0.1, f_nominal=FZ)
    assert np.array_equal(a.sigma, b.sigma)


def test_pll_then_allan_on_noiseless_tone():
    s = spectral.pll_extract(protocols.chirp_trace(rate=0.0, duration=60.0), FZ, 5.0)
    res = spectral.allan_deviation(s, [0.1, 1.0, 10.0])
    assert np.all(res.sigma < 1e-9)


def test_thermally_limited_oscillator_approaches_thermal_allan_limit():
    env = physics.Environment()
    part = physics.ParticleSpec(4.3e-17, 150e-9, shape="dumbbell")
    gamma = 2 * math.pi * 0.05
    cfg = dynamics.SimConfig(part, env, gamma=gamma, duration=300.0, dt=1 / (8 * FZ), seed=1,
                             noise_sources=[dynamics.Thermal(300.0)], initial_temperature=300.0)
    s = spectral.pll_extract(dynamics.simulate_trajectory(cfg).position(), FZ, 5.0)
    res = spectral.allan_deviation(s, [0.5, 1.0, 2.0, 5.0, 10.0, 20.0])
    limit = np.array([physics.thermal_allan_limit(env.omega / gamma, env, t) for t in res.taus])
    ratio = res.sigma / limit
    assert np.all((ratio > 1 / 3) & (ratio < 3))
