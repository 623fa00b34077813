"""Frequency-stability tools: Allan deviation, PLL frequency extraction,
linear drift and one-sided PSD estimates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .physics import Estimate
from .traces import TimeTrace


@dataclass
class FrequencySeries:
    """Instantaneous or interval-averaged oscillation frequency.

    ``valid`` flags samples the PLL could lock on; Allan and drift
    estimators skip the others.
    """

    times: np.ndarray  # s
    frequencies: np.ndarray  # Hz
    f_nominal: float  # Hz
    valid: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        if self.times.shape != self.frequencies.shape:
            raise ValueError("times and frequencies must have the same shape")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must increase monotonically")
        if self.valid is None:
            self.valid = np.isfinite(self.frequencies)
        else:
            self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.frequencies)
        if not self.f_nominal > 0:
            raise ValueError("nominal frequency must be positive")

    def __len__(self):
        return self.times.size

    @property
    def dt(self):
        return float(np.median(np.diff(self.times))) if self.times.size > 1 else math.nan

    @property
    def fractional(self):
        return (self.frequencies - self.f_nominal) / self.f_nominal


@dataclass
class AllanResult:
    taus: np.ndarray  # s, the requested averaging times that were evaluated
    sigma: np.ndarray
    error: np.ndarray  # 1 sigma
    n_intervals: np.ndarray
    skipped: list  # (tau, reason) pairs

    def minimum(self):
        ok = np.isfinite(self.sigma)
        if not ok.any():
            raise ValueError("no evaluated averaging time")
        i = int(np.nanargmin(np.where(ok, self.sigma, np.nan)))
        return float(self.taus[i]), float(self.sigma[i])


def allan_deviation(series, taus: Sequence[float], dt: Optional[float] = None,
                    f_nominal: Optional[float] = None,
                    total_time: Optional[float] = None) -> AllanResult:
    """Non-overlapping Allan deviation of a frequency record.

    sigma^2(tau) = sum_k (f_k - f_{k-1})^2 / (2 f_z^2 (N - 1)), with f_k the
    mean over the k-th block of length tau and N = [t_f / tau] blocks; a
    trailing partial block is dropped. ``series`` is a
    :class:`FrequencySeries` or a raw array of equally spaced samples (then
    ``dt`` and ``f_nominal`` are required). Averaging times with N < 2 are
    skipped and listed in ``skipped``. Blocks without valid samples break
    the chain: differences touching them are left out.
    """
    if isinstance(series, FrequencySeries):
        f = series.frequencies
        valid = series.valid
        dt = series.dt if dt is None else dt
        fz = series.f_nominal if f_nominal is None else f_nominal
    else:
        f = np.asarray(series, dtype=float)
        valid = np.isfinite(f)
        fz = f_nominal
        if dt is None or fz is None:
            raise ValueError("raw samples need dt and f_nominal")
    if not dt > 0 or not fz > 0:
        raise ValueError("dt and f_nominal must be positive")
    t_f = f.size * dt if total_time is None else min(total_time, f.size * dt)
    out_t, out_s, out_e, out_n, skipped = [], [], [], [], []
    fv = np.where(valid, f, 0.0)
    for tau in taus:
        m = int(round(tau / dt))
        if m < 1:
            skipped.append((float(tau), "shorter than one sample"))
            continue
        n_blocks = int(math.floor(t_f / (m * dt) + 1e-9))
        n_blocks = min(n_blocks, f.size // m)
        if n_blocks < 2:
            skipped.append((float(tau), "fewer than two intervals"))
            continue
        cnt = valid[:n_blocks * m].reshape(n_blocks, m).sum(axis=1)
        tot = fv[:n_blocks * m].reshape(n_blocks, m).sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
        d = np.diff(means)
        d = d[np.isfinite(d)]
        if d.size < 1:
            skipped.append((float(tau), "no valid adjacent intervals"))
            continue
        d2 = d * d
        var = float(np.sum(d2) / (2 * fz**2 * d.size))
        sig = math.sqrt(var)
        # standard error of the mean squared difference, propagated to sigma
        if d.size > 1 and sig > 0:
            err = float(np.std(d2, ddof=1) / math.sqrt(d.size) / (2 * fz**2) / (2 * sig))
        else:
            err = math.nan if sig > 0 else 0.0
        out_t.append(m * dt)
        out_s.append(sig)
        out_e.append(err)
        out_n.append(d.size + 1)
    return AllanResult(np.array(out_t), np.array(out_s), np.array(out_e),
                       np.array(out_n, dtype=int), skipped)


def lowpass_sos(cutoff: float, fs: float):
    """Two cascaded single-pole sections at ``cutoff`` (Hz)."""
    one = signal.butter(1, cutoff, btype="low", fs=fs, output="sos")
    return np.vstack([one, one])


def pll_extract(trace: TimeTrace, f_z: float, cutoff: float = 5.0,
                amplitude_threshold: Optional[float] = None, decimate: bool = True,
                settle: Optional[float] = None) -> FrequencySeries:
    """Instantaneous frequency by quadrature demodulation at ``f_z``.

    The signal is mixed with cos and -sin at ``f_z``, both products are
    low-passed forward and backward (zero phase), the phase is
    atan2(Y, X) unwrapped, and f = f_z + (d phi/dt) / 2 pi by central
    differences. The result is block-averaged to 1/(2 cutoff) and
    ``settle`` seconds (default 5/cutoff) are trimmed from both ends.
    Samples whose demodulated amplitude is below ``amplitude_threshold``
    are flagged invalid.
    """
    fs = trace.sample_rate
    if not fs > 4 * f_z:
        raise ValueError(f"sample rate {fs} Hz must exceed 4 f_z = {4 * f_z} Hz")
    if not 0 < cutoff < f_z / 10:
        raise ValueError("cutoff must lie below f_z / 10")
    t = trace.times
    u = np.where(trace.mask(), trace.values, 0.0)
    ph = 2 * math.pi * f_z * (t - t[0])
    sos = lowpass_sos(cutoff, fs)
    x = 2 * signal.sosfiltfilt(sos, u * np.cos(ph))
    y = 2 * signal.sosfiltfilt(sos, -u * np.sin(ph))
    phi = np.unwrap(np.arctan2(y, x))
    freq = f_z + np.gradient(phi, trace.dt) / (2 * math.pi)
    amp = np.hypot(x, y)
    ok = trace.mask().copy()
    if amplitude_threshold is not None:
        ok &= amp >= amplitude_threshold
    settle = 5.0 / cutoff if settle is None else settle
    keep = (t >= t[0] + settle) & (t <= t[-1] - settle)
    if keep.sum() < 2:
        raise ValueError("trace too short for the filter settling time")
    t, freq, ok, amp = t[keep], freq[keep], ok[keep], amp[keep]
    if decimate:
        m = max(1, int(round(1.0 / (2 * cutoff) / trace.dt)))
        nb = t.size // m
        t = t[:nb * m].reshape(nb, m).mean(axis=1)
        cnt = ok[:nb * m].reshape(nb, m).sum(axis=1)
        tot = np.where(ok, freq, 0.0)[:nb * m].reshape(nb, m).sum(axis=1)
        amp = amp[:nb * m].reshape(nb, m).mean(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            freq = np.where(cnt == m, tot / m, np.nan)
        ok = cnt == m
    return FrequencySeries(t, freq, f_z, ok, {"cutoff": cutoff, "amplitude": amp})


BARTLETT_LAGS = 8
BLUE_RATIO = 0.5


def _long_run_ratio(r, lags=BARTLETT_LAGS):
    """Bartlett long-run variance of ``r`` and its ratio to the plain variance."""
    g0 = float(np.mean(r * r))
    if g0 == 0.0:
        return 0.0, 1.0
    lrv = g0 + 2 * sum((1 - k / (lags + 1)) * float(np.mean(r[:-k] * r[k:]))
                       for k in range(1, min(lags, r.size - 1) + 1))
    return max(lrv, 0.0), max(lrv, 0.0) / g0


def _slope_fit(X, y, col):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    lrv, ratio = _long_run_ratio(y - X @ beta)
    var = np.linalg.inv(X.T @ X)[col, col] * lrv
    return float(beta[col]), float(math.sqrt(var)), ratio


def drift_fit(series: FrequencySeries) -> Estimate:
    """Linear frequency drift (Hz/s) with a 1 sigma that respects the noise colour.

    The straight-line fit of frequency against time is kept when its
    residuals are white or red. Block-averaged PLL output is instead
    dominated by differenced phase noise, which shows up as a Bartlett
    long-run variance well below the plain residual variance. The
    frequency is then integrated to phase within each contiguous run of
    valid samples and fitted by ``phi = c_seg + f1 t + r t^2 / 2`` with one
    offset per run. Either way the 1 sigma uses the Bartlett long-run
    variance of the residuals (``BARTLETT_LAGS`` lags).
    """
    valid = series.valid
    t = series.times[valid]
    f = series.frequencies[valid]
    if t.size < 10:
        raise ValueError("drift fit needs at least 10 valid samples")
    tc = t - t.mean()
    y = f - f.mean()
    slope, sigma, ratio = _slope_fit(np.column_stack([np.ones_like(tc), tc]), y, 1)
    if ratio >= BLUE_RATIO:
        return Estimate(slope, sigma)
    # contiguous runs of valid samples share a phase offset
    idx = np.flatnonzero(valid)
    seg = np.concatenate([[0], np.cumsum(np.diff(idx) > 1)])
    n_seg = int(seg[-1]) + 1
    if t.size < 10 * n_seg:
        return Estimate(slope, sigma)
    steps = np.diff(t, prepend=t[0])
    steps[np.concatenate([[True], seg[1:] != seg[:-1]])] = 0.0
    phase = np.cumsum(y * steps)
    X = np.column_stack([seg == k for k in range(n_seg)] + [tc, 0.5 * tc**2]).astype(float)
    slope, sigma, _ = _slope_fit(X, phase, n_seg + 1)
    return Estimate(slope, sigma)


def psd(trace: TimeTrace, segment_length: float, window: str = "hann"):
    """One-sided averaged-periodogram PSD (unit^2/Hz) of the valid samples.

    ``segment_length`` is in seconds. Returns ``(frequencies, density)``.
    """
    nper = int(round(segment_length / trace.dt))
    x = trace.values
    if trace.valid is not None and not trace.valid.all():
        raise ValueError("PSD needs a gap-free trace")
    if nper < 2 or x.size < 2 * nper:
        raise ValueError("trace must hold at least two segments")
    f, p = signal.welch(x, fs=trace.sample_rate, window=window, nperseg=nper,
                        detrend=False, scaling="density", return_onesided=True)
    return f, p


def synthetic_frequency_noise(n: int, dt: float, f_nominal: float, rng,
                              white: float = 0.0, random_walk: float = 0.0,
                              drift: float = 0.0) -> FrequencySeries:
    """Frequency record with white and random-walk fractional noise plus a drift.

    ``white`` and ``random_walk`` set the Allan deviation asymptotes
    sigma(tau) = white / sqrt(tau) and random_walk * sqrt(tau); ``drift`` is
    a linear frequency ramp in Hz/s.
    """
    if n < 2 or not dt > 0:
        raise ValueError("need n >= 2 and dt > 0")
    y = white / math.sqrt(dt) * rng.standard_normal(n)
    if random_walk > 0:
        # a random walk with step variance q dt has sigma^2(tau) = q tau / 3
        y = y + np.cumsum(random_walk * math.sqrt(3 * dt) * rng.standard_normal(n))
    t = dt * np.arange(n)
    return FrequencySeries(t, f_nominal * (1 + y) + drift * t, f_nominal)
