"""Closed-loop measurement protocols: simulate, detect, estimate.

Each protocol has a data stage (simulation plus detection model, returning
what an experiment would have recorded) and an ``*_experiment`` wrapper
that also runs the matching estimator, so recovered parameters can be
compared against the configured truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import analysis, detection, dynamics, spectral
from .constants import HBAR, K_B
from .physics import Environment, ParticleSpec, force_psd_from_rate, gas_heating_rate
from .traces import TimeTrace

DEFAULT_PARTICLE = ParticleSpec(mass=4.3e-17, radius=150e-9, charge=300, shape="dumbbell")


def default_env(pressure_mbar=7e-11, **kwargs):
    return Environment.from_mbar(pressure_mbar, **kwargs)


# --- ring-up --------------------------------------------------------------------

@dataclass
class RingupData:
    variance: TimeTrace  # ensemble-mean APD variance, V^2
    variance_sem: np.ndarray  # V^2
    t_switch: float  # s
    stiffness: float  # N/m
    truth: dict


@dataclass
class RingupOutcome:
    data: RingupData
    energy: TimeTrace  # calibrated, k_B T0 units
    energy_sem: np.ndarray
    calibration: detection.ApdCalibration
    calibration_fit: object
    fit: object
    truth: dict

    @property
    def variance(self):
        return self.data.variance


def ringup_data(gamma: float, t_fb_kelvin: float, n_traj: int = 400,
                duration: float = 10.0, t_switch: float = 0.5, bin_s: float = 0.1,
                particle: ParticleSpec = DEFAULT_PARTICLE, env: Optional[Environment] = None,
                alpha: float = 1e5, readout_noise_psd: float = 0.0, seed: int = 0,
                t0_kelvin: float = 300.0) -> RingupData:
    """Feedback-cool, release at ``t_switch`` and record the APD variance.

    Each trajectory starts in a thermal state at ``T_fb`` with cold damping
    holding it there until ``t_switch``. The squared APD signal is averaged
    in ``bin_s`` bins and then over the ensemble.
    """
    env = env or default_env(1.2e-4, gas_temperature=t0_kelvin)
    gain = gamma * (t0_kelvin / t_fb_kelvin - 1.0)
    cfg = dynamics.SimConfig(
        particle=particle, env=env, gamma=gamma, duration=duration, seed=seed,
        noise_sources=[dynamics.Thermal(t0_kelvin)],
        feedback=dynamics.FeedbackConfig(gain),
        schedule=[dynamics.Window("feedback", 0.0, t_switch)],
        initial_temperature=t_fb_kelvin)

    def reduce(traj):
        rng = dynamics.derive_rng(seed, traj.index, dynamics.STREAM_MEASUREMENT)
        u = detection.apd_trace(traj.position(), alpha, readout_noise_psd, rng)
        return dynamics.mean_square_series(u, bin_s)

    series = dynamics.simulate_ensemble(cfg, n_traj, reduce=reduce)
    stack = np.vstack([s.values for s in series])
    variance = series[0].with_values(stack.mean(axis=0), unit="V2", name="apd_variance")
    if n_traj > 1:
        sem = stack.std(axis=0, ddof=1) / math.sqrt(n_traj)
    else:
        sem = np.full(stack.shape[1], np.nan)
    return RingupData(variance, sem, t_switch, particle.mass * env.omega**2,
                      {"gamma": gamma, "T_fb": t_fb_kelvin, "alpha": alpha,
                       "feedback_gain": gain, "n_traj": n_traj, "T0": t0_kelvin})


def ringup_estimate(data: RingupData, t_fb_kelvin: float, t0_kelvin: float = 300.0
                    ) -> RingupOutcome:
    """APD calibration fit, then the ring-up fit with T_fb held fixed."""
    cal, cal_fit = detection.calibrate_ringup(data.variance, data.t_switch, t0_kelvin,
                                              stiffness=data.stiffness)
    energy = data.variance.with_values(
        detection.variance_to_energy(data.variance.values, cal), unit="kT0", name="energy")
    sem = detection.variance_to_energy(data.variance_sem, cal)
    fit = analysis.ringup_fit(energy, t_fb_kelvin, t0_kelvin, start=data.t_switch)
    return RingupOutcome(data, energy, sem, cal, cal_fit, fit, data.truth)


def ringup_experiment(gamma: float, t_fb_kelvin: float, n_traj: int = 400, **kwargs
                      ) -> RingupOutcome:
    data = ringup_data(gamma, t_fb_kelvin, n_traj, **kwargs)
    return ringup_estimate(data, t_fb_kelvin, kwargs.get("t0_kelvin", 300.0))


# --- ring-down ------------------------------------------------------------------

# Frame cadence, record length and amplitudes per pressure point. The
# cadences are set so that the mean log-variance of the record sits near
# the values reported for the measured ring-downs.
RINGDOWN_PLANS = {
    "P2": dict(pressure_mbar=5.4e-8, gamma=2 * math.pi * 59e-6, cadence=120.0,
               duration=2 * 3600.0, initial_amplitude=250e-6, delta_a=3.9e-6),
    "P3": dict(pressure_mbar=5e-9, gamma=2 * math.pi * 5.9e-6, cadence=1800.0,
               duration=24 * 3600.0, initial_amplitude=250e-6, delta_a=3.2e-6),
    "P4": dict(pressure_mbar=7e-11, gamma=2 * math.pi * 69e-9, cadence=7200.0,
               duration=3 * 86400.0, initial_amplitude=120e-6, delta_a=1.9e-6),
}


@dataclass
class RingdownData:
    times: np.ndarray  # s
    true_squared: np.ndarray  # m^2
    measured_squared: np.ndarray  # m^2
    delta_a: float  # m
    truth: dict


@dataclass
class RingdownOutcome:
    data: RingdownData
    fit: object
    truth: dict

    @property
    def times(self):
        return self.data.times

    @property
    def measured_squared(self):
        return self.data.measured_squared


def ringdown_data(gamma: float, cadence: float, duration: float,
                  initial_amplitude: float = 250e-6, delta_a: float = 3.9e-6,
                  particle: ParticleSpec = DEFAULT_PARTICLE,
                  env: Optional[Environment] = None, seed: int = 0, index: int = 0,
                  excess_fraction: float = 0.0, excess_scale: float = 1.0,
                  t0_kelvin: float = 300.0) -> RingdownData:
    """Large-amplitude free decay sampled by camera frames every ``cadence`` s.

    The exact integrator steps straight from frame to frame. Each frame's
    squared amplitude z^2 + (v/Omega)^2 gets Delta-a read-out error, with an
    optional intermittent excess.
    """
    env = env or default_env(gas_temperature=t0_kelvin)
    omega = env.omega
    rng0 = dynamics.derive_rng(seed, index, dynamics.STREAM_INITIAL)
    phase = rng0.uniform(0, 2 * math.pi)
    start = dynamics.OscState(initial_amplitude * math.cos(phase),
                              -initial_amplitude * omega * math.sin(phase))
    n = int(round(duration / cadence)) + 1
    cfg = dynamics.SimConfig(particle=particle, env=env, gamma=gamma, dt=cadence,
                             duration=n * cadence, seed=seed,
                             noise_sources=[dynamics.Thermal(t0_kelvin)],
                             initial_state=start)
    traj = dynamics.simulate_trajectory(cfg, index)
    true_sq = traj.squared_amplitude()
    rng = dynamics.derive_rng(seed, index, dynamics.STREAM_MEASUREMENT)
    meas = detection.camera_amplitudes(true_sq, delta_a, rng, excess_fraction, excess_scale)
    return RingdownData(traj.t, true_sq, meas, delta_a,
                        {"gamma": gamma, "delta_a": delta_a, "cadence": cadence,
                         "excess_fraction": excess_fraction, "excess_scale": excess_scale})


def ringdown_experiment(gamma: float, cadence: float, duration: float, **kwargs
                        ) -> RingdownOutcome:
    data = ringdown_data(gamma, cadence, duration, **kwargs)
    fit = analysis.ringdown_fit(data.times, data.measured_squared, data.delta_a)
    return RingdownOutcome(data, fit, data.truth)


def ringdown_plan(point: str, **overrides) -> RingdownOutcome:
    """Run the ring-down for a named pressure point of :data:`RINGDOWN_PLANS`."""
    plan = dict(RINGDOWN_PLANS[point])
    plan.update(overrides)
    pressure = plan.pop("pressure_mbar")
    gamma = plan.pop("gamma")
    plan.setdefault("env", default_env(pressure))
    return ringdown_experiment(gamma, **plan)


# --- reheating -----------------------------------------------------------------

@dataclass
class HeatingData:
    energies: np.ndarray  # (n_traj, n_bins), k_B T0 units
    bin_s: float
    t_switch: float
    lit: np.ndarray  # bins wholly inside an illumination window
    omega: float
    truth: dict

    def mean_energy(self, strobe: bool = False) -> TimeTrace:
        return TimeTrace(self.energies.mean(axis=0), self.bin_s, "kT0", 0.5 * self.bin_s,
                         "energy_strobe" if strobe else "energy",
                         self.lit if strobe else None)


@dataclass
class HeatingOutcome:
    data: HeatingData
    t_fb_measured: float  # K, from the feedback window
    fit: object
    fit_strobe: object
    truth: dict

    @property
    def energy(self):
        return self.data.mean_energy(False)

    @property
    def energy_strobe(self):
        return self.data.mean_energy(True)


def heating_data(total_rate: float, t_fb_kelvin: float = 0.8, n_traj: int = 100,
                 free_time: float = 200.0, t_switch: float = 5.0, bin_s: float = 0.1,
                 strobe_on: float = 0.5, strobe_period: float = 20.0,
                 particle: ParticleSpec = DEFAULT_PARTICLE, env: Optional[Environment] = None,
                 gamma: Optional[float] = None, seed: int = 0,
                 t0_kelvin: float = 300.0) -> HeatingData:
    """Reheating from a feedback-cooled state under a white force bath.

    The particle feels gas damping ``gamma`` at ``T0`` plus extra white
    force noise bringing the total heating rate to ``total_rate``
    (phonons/s). Feedback holds it at ``T_fb`` until ``t_switch``. The
    same runs serve the continuous and the stroboscopic read-out
    (``strobe_on`` every ``strobe_period``, feedback phase lit).
    """
    env = env or default_env(gas_temperature=t0_kelvin)
    if gamma is None:
        gamma = 2 * math.pi * 69e-9
    omega = env.omega
    gas_rate = gas_heating_rate(gamma, env)
    extra = total_rate - gas_rate
    if extra < 0:
        raise ValueError("total heating rate is below the gas contribution")
    noise = [dynamics.Thermal(t0_kelvin),
             dynamics.WhiteForce(force_psd_from_rate(extra, particle.mass, omega))]
    gain = dynamics.feedback_gain_for_temperature(t_fb_kelvin, total_rate * HBAR * omega, gamma)
    duration = t_switch + free_time
    cfg = dynamics.SimConfig(particle=particle, env=env, gamma=gamma, duration=duration,
                             seed=seed, noise_sources=noise,
                             feedback=dynamics.FeedbackConfig(gain),
                             schedule=[dynamics.Window("feedback", 0.0, t_switch)],
                             initial_temperature=t_fb_kelvin)
    windows = [dynamics.Window("illumination", 0.0, t_switch)] + dynamics.stroboscopic_windows(
        strobe_on, strobe_period, t_switch, duration)

    def reduce(traj):
        return dynamics.energy_series(traj.position(), bin_s, traj.mass, traj.omega).values

    stack = np.vstack(dynamics.simulate_ensemble(cfg, n_traj, reduce=reduce))
    left = np.arange(stack.shape[1]) * bin_s
    # a bin counts as lit only when it lies entirely inside a window
    lit = (dynamics.window_mask(windows, "illumination", left, False)
           & dynamics.window_mask(windows, "illumination", left + bin_s * (1 - 1e-9), False))
    return HeatingData(stack / (K_B * t0_kelvin), bin_s, t_switch, lit, omega,
                       {"Gamma": total_rate, "T_fb": t_fb_kelvin, "feedback_gain": gain,
                        "gas_rate": gas_rate, "n_traj": n_traj, "T0": t0_kelvin})


def heating_estimate(data: HeatingData, strobe: bool = False, t0_kelvin: float = 300.0):
    """Ensemble reheating fit with the intercept at the feedback-window energy."""
    return analysis.heating_fit_ensemble(data.energies, data.bin_s, data.omega,
                                         data.t_switch, t0_kelvin,
                                         valid=data.lit if strobe else None)


def heating_experiment(total_rate: float, t_fb_kelvin: float = 0.8, n_traj: int = 100,
                       **kwargs) -> HeatingOutcome:
    data = heating_data(total_rate, t_fb_kelvin, n_traj, **kwargs)
    t0 = kwargs.get("t0_kelvin", 300.0)
    fit = heating_estimate(data, False, t0)
    fit_s = heating_estimate(data, True, t0)
    return HeatingOutcome(data, fit.extra["T_fb"], fit, fit_s, data.truth)


# --- frequency stability ---------------------------------------------------------

def default_taus(duration: float, dt: float, n: int = 25) -> np.ndarray:
    """Log-spaced averaging times from 1 s to a quarter of the record."""
    return np.unique(np.round(np.logspace(0, math.log10(duration / 4), n) / dt) * dt)


def frequency_record(duration: float = 4000.0, dt: float = 0.1, f_z: float = 1.28e3,
                     white: float = 6.32e-6, random_walk: float = 3.16e-7,
                     drift: float = 0.0, seed: int = 0) -> spectral.FrequencySeries:
    """Detection-limited frequency record with white and random-walk noise.

    The defaults put the white and random-walk asymptotes equal at 20 s,
    where sigma reaches 2e-6.
    """
    rng = dynamics.derive_rng(seed, 0, dynamics.STREAM_MEASUREMENT)
    n = int(round(duration / dt))
    return spectral.synthetic_frequency_noise(n, dt, f_z, rng, white, random_walk, drift)


@dataclass
class AllanOutcome:
    series: spectral.FrequencySeries
    allan: spectral.AllanResult
    drift: object
    truth: dict


def allan_experiment(duration: float = 4000.0, dt: float = 0.1, f_z: float = 1.28e3,
                     white: float = 6.32e-6, random_walk: float = 3.16e-7,
                     drift: float = 0.0, taus=None, seed: int = 0) -> AllanOutcome:
    series = frequency_record(duration, dt, f_z, white, random_walk, drift, seed)
    res = spectral.allan_deviation(series, default_taus(duration, dt) if taus is None else taus)
    return AllanOutcome(series, res, spectral.drift_fit(series),
                        {"white": white, "random_walk": random_walk, "drift": drift})


def chirp_trace(rate: float = 8e-8, duration: float = 600.0, f_z: float = 1.28e3,
                amplitude: float = 1.0, samples_per_period: int = 8,
                noise_psd: float = 0.0, seed: int = 0) -> TimeTrace:
    """Linearly chirped tone as an APD voltage trace, optionally with white noise."""
    fs = samples_per_period * f_z
    t = np.arange(int(round(duration * fs))) / fs
    u = amplitude * np.cos(2 * math.pi * (f_z * t + 0.5 * rate * t * t))
    if noise_psd > 0:
        rng = dynamics.derive_rng(seed, 0, dynamics.STREAM_MEASUREMENT)
        u = u + math.sqrt(noise_psd * fs / 2) * rng.standard_normal(t.size)
    return TimeTrace(u, 1 / fs, "V", 0.0, "apd")


def chirp_experiment(rate: float = 8e-8, duration: float = 600.0, f_z: float = 1.28e3,
                     cutoff: float = 5.0, **kwargs):
    """PLL frequency extraction of a chirped tone; returns ``(series, drift)``."""
    series = spectral.pll_extract(chirp_trace(rate, duration, f_z, **kwargs), f_z, cutoff)
    return series, spectral.drift_fit(series)


# --- camera amplitude uncertainty -------------------------------------------------

def profile_set(amplitudes_m, pixel_pitch: float = 2.7e-6, w_px: float = 8.2,
                i0: float = 2.1, offset_c: float = 0.106, slope_b: float = 1.0e-3,
                noise: float = 0.02, seed: int = 0):
    """Rendered profiles with multiplicative Gaussian noise, one per amplitude."""
    rng = dynamics.derive_rng(seed, 0, dynamics.STREAM_MEASUREMENT)
    out = []
    for a_m in amplitudes_m:
        a = a_m / pixel_pitch
        n = int(math.ceil(2 * a + 12 * w_px)) + 20
        z0 = n / 2 + rng.uniform(-0.5, 0.5)
        clean = detection.render_profile(a, z0, i0, w_px, slope_b, offset_c, n, pixel_pitch)
        out.append(replace(clean, intensities=clean.intensities
                           * (1 + noise * rng.standard_normal(n))))
    return out


def profile_set_uncertainty(amplitudes_m, **kwargs):
    """Delta a (m) of a set of noisy rendered profiles; returns ``(delta_a, fits)``."""
    fits = [detection.fit_profile(p) for p in profile_set(amplitudes_m, **kwargs)]
    return detection.amplitude_uncertainty(fits), fits
