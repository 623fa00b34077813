"""Stochastic simulation of the secular z-mode of a trapped particle.

The equation of motion

    z'' + (gamma + gamma_fb) z' + Omega^2 z = (F_noise + F_drive) / m

is linear, so it is advanced with its exact Gaussian transition for any step
size. Internally the state is carried as the complex normal-mode amplitude

    zeta = v + (gamma/2 - i w_d) z,      zeta' = -(gamma/2 + i w_d) zeta + F/m

which turns a block of steps into a first-order complex recursion that
``scipy.signal.lfilter`` evaluates in C.
"""

from __future__ import annotations

import cmath
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .constants import K_B
from .physics import Environment, ParticleSpec, gas_damping_rate, thermal_force_psd
from .traces import TimeTrace

SAMPLES_PER_PERIOD = 16
_STEP_CHUNK = 1 << 20


class ConfigError(ValueError):
    """A simulation configuration is inconsistent."""


class UnsupportedRegimeError(ValueError):
    """The oscillator is critically or over-damped."""


# --- configuration ---------------------------------------------------------

@dataclass(frozen=True)
class Thermal:
    """Gas bath at ``temperature``; force PSD 4 k_B T m gamma."""
    temperature: float = 300.0


@dataclass(frozen=True)
class WhiteForce:
    """Extra white force noise with one-sided PSD ``psd`` in N^2/Hz."""
    psd: float


@dataclass(frozen=True)
class Displacement:
    """White jitter of the trap centre, one-sided PSD ``psd`` in m^2/Hz.

    It acts as the force m Omega^2 xi(t).
    """
    psd: float


@dataclass(frozen=True)
class FeedbackConfig:
    """Ideal cold damping: extra velocity damping ``gain`` (rad/s), no noise."""
    gain: float

    def __post_init__(self):
        if self.gain < 0:
            raise ConfigError("feedback gain must be non-negative")


@dataclass(frozen=True)
class DriveConfig:
    force_amplitude: float  # N
    frequency: float  # Hz
    phase: float = 0.0  # rad

    def __post_init__(self):
        if self.force_amplitude < 0:
            raise ConfigError("drive amplitude must be non-negative")


@dataclass(frozen=True)
class Window:
    """Time window ``[start, stop)`` during which ``kind`` is switched on.

    ``kind`` is one of ``"feedback"``, ``"drive"`` or ``"illumination"``.
    Without any window of a kind, that element is on for the whole run.
    """
    kind: str
    start: float
    stop: float


WINDOW_KINDS = ("feedback", "drive", "illumination")


@dataclass(frozen=True)
class OscState:
    z: float
    v: float
    t: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.z) and math.isfinite(self.v) and math.isfinite(self.t)):
            raise ValueError("oscillator state must be finite")


@dataclass
class SimConfig:
    particle: ParticleSpec
    env: Environment
    gamma: Optional[float] = None  # rad/s, gas damping; derived from physics if None
    dt: Optional[float] = None  # s, defaults to 1/16 of a period
    duration: float = 1.0  # s
    seed: int = 0
    noise_sources: Sequence = ()
    feedback: Optional[FeedbackConfig] = None
    drive: Optional[DriveConfig] = None
    schedule: Sequence[Window] = ()
    initial_state: Optional[OscState] = None
    initial_temperature: Optional[float] = None  # K, thermal initial state

    def __post_init__(self):
        if self.dt is None:
            self.dt = 1.0 / (SAMPLES_PER_PERIOD * self.env.secular_frequency)
        if self.gamma is None:
            self.gamma = gas_damping_rate(self.particle, self.env)
        self.noise_sources = tuple(self.noise_sources)
        self.schedule = tuple(self.schedule)
        self.validate()

    @property
    def omega(self):
        return self.env.omega

    @property
    def n_samples(self):
        return int(round(self.duration / self.dt))

    def validate(self):
        problems = []
        if not self.dt > 0:
            problems.append("dt must be positive")
        elif self.duration < self.dt:
            problems.append("duration must be at least one step")
        if self.gamma < 0:
            problems.append("gamma must be non-negative")
        for src in self.noise_sources:
            if not isinstance(src, (Thermal, WhiteForce, Displacement)):
                problems.append(f"unknown noise source {src!r}")
            elif isinstance(src, Thermal) and not src.temperature >= 0:
                problems.append("thermal temperature must be non-negative")
            elif isinstance(src, (WhiteForce, Displacement)) and src.psd < 0:
                problems.append("noise PSD must be non-negative")
        if self.initial_state is not None and self.initial_temperature is not None:
            problems.append("give either initial_state or initial_temperature, not both")
        problems.extend(_schedule_problems(self))
        if problems:
            raise ConfigError("; ".join(problems))

    def force_psd(self):
        """Total one-sided force PSD (N^2/Hz) of all noise sources."""
        m, omega = self.particle.mass, self.omega
        total = 0.0
        for src in self.noise_sources:
            if isinstance(src, Thermal):
                total += thermal_force_psd(src.temperature, m, self.gamma)
            elif isinstance(src, WhiteForce):
                total += src.psd
            elif isinstance(src, Displacement):
                total += (m * omega**2) ** 2 * src.psd
        return total

    def heating_power(self):
        """Mean energy input of the noise sources, d<E>/dt in W."""
        return self.force_psd() / (4 * self.particle.mass)


def _schedule_problems(cfg):
    problems = []
    for w in cfg.schedule:
        if w.kind not in WINDOW_KINDS:
            problems.append(f"unknown window kind {w.kind!r}")
        if not w.stop > w.start:
            problems.append(f"window {w} has stop <= start")
    for kind in WINDOW_KINDS:
        ws = sorted((w for w in cfg.schedule if w.kind == kind), key=lambda w: w.start)
        for a, b in zip(ws, ws[1:]):
            if b.start < a.stop:
                problems.append(f"overlapping {kind} windows {a} and {b}")
    if any(w.kind == "feedback" for w in cfg.schedule) and cfg.feedback is None:
        problems.append("feedback windows given without a feedback config")
    if any(w.kind == "drive" for w in cfg.schedule) and cfg.drive is None:
        problems.append("drive windows given without a drive config")
    return problems


def stroboscopic_windows(on_time, period, start=0.0, stop=None, n=None):
    """Illumination windows of length ``on_time`` every ``period`` from ``start``."""
    if not 0 < on_time <= period:
        raise ConfigError("need 0 < on_time <= period")
    if n is None:
        if stop is None:
            raise ConfigError("give stop or n")
        n = int(math.ceil((stop - start) / period - 1e-9))
    return [Window("illumination", start + k * period, start + k * period + on_time)
            for k in range(n)]


def feedback_gain_for_temperature(target_temperature, heating_power, gamma):
    """Cold-damping gain giving a steady state energy k_B T_target.

    For a pure gas bath this reduces to T_target = T_0 gamma / (gamma + gain).
    """
    total = heating_power / (K_B * target_temperature)
    gain = total - gamma
    if gain < 0:
        raise ConfigError("target temperature is above the free steady state")
    return gain


# --- exact transition --------------------------------------------------------

def _cexpm1(w: complex) -> complex:
    x, y = w.real, w.imag
    return complex(math.expm1(x) * math.cos(y) - 2.0 * math.sin(y / 2) ** 2,
                   math.exp(x) * math.sin(y))


def _matrix_sqrt(cov):
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class Transition:
    """Exact one-step propagator of the damped, white-noise-driven oscillator.

    ``force_psd`` is the one-sided force PSD in N^2/Hz.
    """

    def __init__(self, dt, gamma, omega, force_psd=0.0, mass=1.0):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if not omega > 0:
            raise ValueError("omega must be positive")
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        if gamma >= 2 * omega:
            raise UnsupportedRegimeError(
                f"gamma={gamma:g} >= 2 Omega={2 * omega:g}: only underdamped motion is supported")
        self.dt, self.gamma, self.omega = dt, gamma, omega
        self.half_gamma = a = gamma / 2
        self.omega_d = wd = math.sqrt(omega**2 - a**2)
        self.lam = complex(-a, -wd)
        self.mu = complex(a, -wd)
        self.decay = cmath.exp(self.lam * dt)
        q = force_psd / (2 * mass**2)  # velocity diffusion constant
        self.noise_free = q == 0
        e0 = -math.expm1(-2 * a * dt) / (2 * a) if a > 0 else dt
        p = _cexpm1(2 * self.lam * dt) / (2 * self.lam)
        cov = 0.5 * q * np.array([[e0 + p.real, p.imag], [p.imag, e0 - p.real]])
        self.noise_cov = cov
        self._noise_sqrt = _matrix_sqrt(cov)

    def to_mode(self, z, v):
        return v + self.mu * z

    def from_mode(self, zeta):
        z = -np.imag(zeta) / self.omega_d
        return z, np.real(zeta) - self.half_gamma * z

    def noise(self, normals):
        """Map standard normals of shape (n, 2) to complex mode increments."""
        w = normals @ self._noise_sqrt.T
        return w[:, 0] + 1j * w[:, 1]

    def propagate(self, zeta0, n, rng=None):
        """Mode amplitudes after 1..n steps from ``zeta0``."""
        k = np.arange(1, n + 1)
        out = zeta0 * np.exp(self.lam * self.dt * k)
        if self.noise_free:
            return out
        if rng is None:
            raise ValueError("a random generator is needed for a noisy transition")
        carry = 0j
        for s in range(0, n, _STEP_CHUNK):
            e = min(n, s + _STEP_CHUNK)
            u = self.noise(rng.standard_normal((e - s, 2)))
            eta, _ = lfilter([1.0], [1.0, -self.decay], u, zi=[self.decay * carry])
            out[s:e] += eta
            carry = eta[-1]
        return out


def exact_step(state: OscState, dt, gamma, omega, total_force_psd=0.0, mass=1.0,
               mean_force=0.0, rng=None) -> OscState:
    """Advance ``state`` by ``dt`` with the exact transition of the linear SDE.

    ``mean_force`` is a constant force held over the step. ``rng`` is
    required whenever ``total_force_psd > 0``.
    """
    tr = Transition(dt, gamma, omega, total_force_psd, mass)
    z_eq = mean_force / (mass * omega**2)
    zeta = tr.propagate(tr.to_mode(state.z - z_eq, state.v), 1, rng)
    z, v = tr.from_mode(zeta)
    return OscState(float(z[0]) + z_eq, float(v[0]), state.t + dt)


# --- trajectories ------------------------------------------------------------

@dataclass
class Trajectory:
    """Sampled state of one simulated run."""

    t: np.ndarray
    z: np.ndarray
    v: np.ndarray
    illuminated: np.ndarray
    mass: float
    omega: float
    seed: int = 0
    index: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if self.t.size > 1 else 0.0

    def __len__(self):
        return self.t.size

    def state(self, i) -> OscState:
        return OscState(float(self.z[i]), float(self.v[i]), float(self.t[i]))

    def energy(self):
        """Instantaneous mechanical energy (J)."""
        return 0.5 * self.mass * (self.v**2 + (self.omega * self.z) ** 2)

    def squared_amplitude(self):
        """Squared oscillation amplitude 2E/(m Omega^2) in m^2."""
        return self.z**2 + (self.v / self.omega) ** 2

    def position(self) -> TimeTrace:
        valid = None if self.illuminated.all() else self.illuminated
        return TimeTrace(self.z, self.dt, "m", float(self.t[0]), "z", valid)


def derive_rng(seed, index=0, stream=0):
    """Counter-based generator for (seed, trajectory index, stream)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index), int(stream)))
    return np.random.Generator(np.random.Philox(ss))


STREAM_DYNAMICS, STREAM_INITIAL, STREAM_MEASUREMENT = 0, 1, 2


def thermal_state(temperature, mass, omega, rng, t=0.0) -> OscState:
    """Draw a phase-space point from the thermal distribution at ``temperature``."""
    sz = math.sqrt(K_B * temperature / (mass * omega**2))
    sv = math.sqrt(K_B * temperature / mass)
    z, v = rng.standard_normal(2)
    return OscState(sz * z, sv * v, t)


def window_mask(windows, kind, t, default):
    ws = [w for w in windows if w.kind == kind]
    if not ws:
        return np.full(t.shape, default, dtype=bool)
    on = np.zeros(t.shape, dtype=bool)
    eps = 1e-9 * (t[1] - t[0] if t.size > 1 else 1.0)
    for w in ws:
        on |= (t >= w.start - eps) & (t < w.stop - eps)
    return on


def _drive_response(drive, gamma, omega, mass, t):
    """Steady-state (z, v) of the sinusoidal drive at times ``t``."""
    wc = 2 * math.pi * drive.frequency
    denom = complex(omega**2 - wc**2, gamma * wc)
    if abs(denom) < 1e-12 * omega**2:
        raise UnsupportedRegimeError("undamped resonant drive has no steady state")
    amp = drive.force_amplitude / mass / denom * cmath.exp(1j * drive.phase)
    ph = np.exp(1j * wc * np.asarray(t))
    return np.real(amp * ph), np.real(1j * wc * amp * ph)


def simulate_trajectory(config: SimConfig, index: int = 0) -> Trajectory:
    """Simulate one run; deterministic in (config, seed, index)."""
    cfg = config
    n = cfg.n_samples
    t = np.arange(n) * cfg.dt
    m, omega = cfg.particle.mass, cfg.omega
    rng = derive_rng(cfg.seed, index, STREAM_DYNAMICS)

    if cfg.initial_state is not None:
        z0, v0 = cfg.initial_state.z, cfg.initial_state.v
    elif cfg.initial_temperature is not None:
        s = thermal_state(cfg.initial_temperature, m, omega,
                          derive_rng(cfg.seed, index, STREAM_INITIAL))
        z0, v0 = s.z, s.v
    else:
        z0 = v0 = 0.0

    fb_on = window_mask(cfg.schedule, "feedback", t, cfg.feedback is not None)
    drive_on = window_mask(cfg.schedule, "drive", t, cfg.drive is not None)
    lit = window_mask(cfg.schedule, "illumination", t, True)

    psd = cfg.force_psd()
    z = np.empty(n)
    v = np.empty(n)
    z[0], v[0] = z0, v0
    # a segment is a run of steps sharing (feedback, drive); step i uses the
    # parameters in force at t[i]
    key = fb_on[:-1].astype(int) * 2 + drive_on[:-1].astype(int)
    cuts = np.flatnonzero(np.diff(key)) + 1
    starts = np.concatenate(([0], cuts)) if n > 1 else np.array([], dtype=int)
    stops = np.concatenate((cuts, [n - 1])) if n > 1 else np.array([], dtype=int)
    transitions = {}
    for i0, i1 in zip(starts, stops):
        fb, dr = bool(fb_on[i0]), bool(drive_on[i0])
        gamma = cfg.gamma + (cfg.feedback.gain if fb else 0.0)
        tr = transitions.get(gamma)
        if tr is None:
            tr = transitions[gamma] = Transition(cfg.dt, gamma, omega, psd, m)
        seg_t = t[i0:i1 + 1]
        if dr:
            zp, vp = _drive_response(cfg.drive, gamma, omega, m, seg_t)
        else:
            zp = vp = np.zeros(seg_t.size)
        zeta0 = tr.to_mode(z[i0] - zp[0], v[i0] - vp[0])
        zh, vh = tr.from_mode(tr.propagate(zeta0, i1 - i0, rng))
        z[i0 + 1:i1 + 1] = zh + zp[1:]
        v[i0 + 1:i1 + 1] = vh + vp[1:]
    return Trajectory(t, z, v, lit, m, omega, cfg.seed, index)


def simulate_ensemble(config: SimConfig, n: int, reduce: Optional[Callable] = None,
                      workers: int = 1) -> list:
    """``n`` independent runs; member ``i`` uses the stream (seed, i).

    ``reduce`` maps each :class:`Trajectory` to whatever should be kept
    (for example an energy series), so that long ensembles need not hold
    every raw trace in memory. Results are ordered by index and do not
    depend on ``workers``.
    """
    if n < 1:
        raise ValueError("ensemble size must be at least 1")

    def one(i):
        traj = simulate_trajectory(config, i)
        return reduce(traj) if reduce is not None else traj

    if workers <= 1:
        return [one(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(n)))


def energy_series(trace: TimeTrace, bin: float, mass: float, omega: float) -> TimeTrace:
    """Energy per time bin, m Omega^2 <z^2>, from a position trace in metres.

    Dark samples are never read; a bin without illuminated samples is
    returned as NaN and marked invalid.
    """
    trace.require_unit("m")
    ms = mean_square_series(trace, bin)
    return ms.with_values(mass * omega**2 * ms.values, unit="J", name="energy")


def mean_square_series(trace: TimeTrace, bin: float) -> TimeTrace:
    """Mean of the squared signal over consecutive bins of length ``bin``.

    The output is stamped at bin centres; a trailing partial bin is dropped.
    """
    m = int(round(bin / trace.dt))
    if m < 1 or bin < trace.dt * (1 - 1e-9):
        raise ValueError(f"bin {bin} s is shorter than one sample ({trace.dt} s)")
    nb = len(trace) // m
    if nb == 0:
        raise ValueError("trace is shorter than one bin")
    x = trace.values[:nb * m].reshape(nb, m)
    mask = trace.mask()[:nb * m].reshape(nb, m)
    count = mask.sum(axis=1)
    sq = np.where(mask, x * x, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(count > 0, sq / np.maximum(count, 1), np.nan)
    unit = {"m": "m2", "V": "V2"}.get(trace.unit, trace.unit + "^2")
    return TimeTrace(vals, m * trace.dt, unit, trace.t0 + 0.5 * m * trace.dt,
                     "mean_square", count > 0)
