"""Measurement channels: APD voltage traces and camera intensity profiles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import curve_fit, least_squares
from scipy.signal import find_peaks, peak_widths

from .constants import K_B
from .physics import Estimate
from .traces import FitError, FitResult, TimeTrace


class ResolutionError(ValueError):
    """The pixel grid is too coarse for the requested image width."""


# --- APD ----------------------------------------------------------------------

@dataclass(frozen=True)
class ApdCalibration:
    alpha: float  # V/m
    variance_scale_a: float  # V^2, equals alpha^2 k_B T0 / (m Omega^2)
    rescale_factor: float = 1.0  # (A'_cal / A'_meas)^2

    def __post_init__(self):
        if not (self.alpha > 0 and self.variance_scale_a > 0 and self.rescale_factor > 0):
            raise ValueError("calibration constants must be positive")

    def with_rescale(self, factor):
        return ApdCalibration(self.alpha, self.variance_scale_a, factor)


def apd_trace(trace: TimeTrace, alpha: float, readout_noise_psd: float = 0.0,
              rng: Optional[np.random.Generator] = None) -> TimeTrace:
    """Detector voltage u = alpha z plus white readout noise (one-sided V^2/Hz)."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    trace.require_unit("m")
    u = alpha * trace.values
    if readout_noise_psd > 0:
        if rng is None:
            raise ValueError("readout noise needs a random generator")
        u = u + rng.standard_normal(u.size) * math.sqrt(readout_noise_psd * trace.sample_rate / 2)
    return trace.with_values(u, unit="V", name="apd")


def rescale_factor(amplitude_cal: float, amplitude_meas: float) -> float:
    """Drive-tone correction (A'_cal / A'_meas)^2 for a changed detector gain."""
    if not (amplitude_cal > 0 and amplitude_meas > 0):
        raise ValueError("tone amplitudes must be positive")
    return (amplitude_cal / amplitude_meas) ** 2


def variance_to_energy(variance, calibration: ApdCalibration, rescale: Optional[float] = None):
    """APD variance (V^2) to energy in units of k_B T0."""
    r = calibration.rescale_factor if rescale is None else rescale
    return np.asarray(variance) * r / calibration.variance_scale_a


def drive_tone_amplitude(trace: TimeTrace, f_cal: float) -> float:
    """Amplitude of the component at ``f_cal`` by least-squares projection.

    Projects onto cos, sin and a constant, which is exact for a pure tone
    even when the record holds a non-integer number of periods.
    """
    if f_cal >= trace.sample_rate / 2:
        raise ValueError(f"f_cal={f_cal} Hz is above the Nyquist frequency")
    if trace.duration * f_cal < 10:
        raise ValueError("trace must span at least 10 periods of the tone")
    mask = trace.mask()
    t = trace.times[mask]
    ph = 2 * math.pi * f_cal * (t - t[0])
    basis = np.column_stack([np.cos(ph), np.sin(ph), np.ones_like(ph)])
    coef, *_ = np.linalg.lstsq(basis, trace.values[mask], rcond=None)
    return float(math.hypot(coef[0], coef[1]))


def calibrate_ringup(variance: TimeTrace, t_fb: float, t0_kelvin: float = 300.0,
                     rescale: float = 1.0, stiffness: Optional[float] = None):
    """Fit sigma(t) = a + (b - a) exp(-gamma (t - t_fb)) to a ring-up.

    ``b`` is the mean variance while feedback is on (t < t_fb); ``a`` and
    ``gamma`` are fitted on t > t_fb. With the trap ``stiffness`` m Omega^2
    (N/m) the gain follows as alpha = sqrt(a m Omega^2 / (k_B T0)) in V/m;
    without it alpha is left in V/sqrt(J). Returns ``(ApdCalibration, FitResult)``;
    the fit carries ``gamma``, ``a``, ``b`` and ``T_fb = T0 b / a``. A
    ring-up without contrast is returned with ``extra["degenerate"] = True``
    and ``gamma = nan``.
    """
    t = variance.times
    y = variance.values
    ok = variance.mask() & np.isfinite(y)
    pre = ok & (t < t_fb)
    post = ok & (t > t_fb)
    if pre.sum() < 1 or post.sum() < 3:
        raise FitError("need feedback-on samples and at least 3 ring-up samples",
                       {"n_pre": int(pre.sum()), "n_post": int(post.sum())})
    b = float(np.mean(y[pre]))
    tp, yp = t[post] - t_fb, y[post]
    tail = yp[-max(3, yp.size // 5):]
    a0 = float(np.mean(tail))
    scatter = float(np.std(yp - a0)) if yp.size > 1 else 0.0

    def model(x, a, gamma):
        return a + (b - a) * np.exp(-gamma * x)

    degenerate = abs(b - a0) <= 1e-12 * max(abs(a0), abs(b)) or not a0 > 0
    params = None
    if not degenerate:
        # 1/e crossing of the relaxation as the starting rate
        frac = (yp - b) / (a0 - b)
        idx = np.flatnonzero(frac > 1 - math.exp(-1))
        g0 = 1.0 / max(tp[idx[0]] if idx.size else tp[-1] / 2, variance.dt)
        try:
            params, cov = curve_fit(model, tp, yp, p0=[a0, g0], maxfev=10000)
        except (RuntimeError, ValueError) as exc:
            raise FitError(f"ring-up calibration did not converge: {exc}",
                           {"a0": a0, "gamma0": g0, "b": b}) from exc
        sig = np.sqrt(np.diag(cov))
        if not np.all(np.isfinite(sig)) or sig[1] > abs(params[1]) or not params[0] > 0:
            degenerate = True
    if degenerate:
        a_fit = a0 if a0 > 0 else b
        fit = FitResult({"a": Estimate(a_fit, math.nan), "gamma": Estimate(math.nan, math.nan),
                         "b": Estimate(b, 0.0), "T_fb": Estimate(t0_kelvin * b / a_fit, math.nan)},
                        np.full((2, 2), np.nan), yp - a_fit, "apd_ringup_calibration",
                        extra={"degenerate": True, "t_fb": t_fb})
        return ApdCalibration(_gain(a_fit, t0_kelvin, stiffness), a_fit, rescale), fit
    a, gamma = params
    resid = yp - model(tp, a, gamma)
    sb = float(np.std(y[pre], ddof=1) / math.sqrt(pre.sum())) if pre.sum() > 1 else 0.0
    t_fb_val = t0_kelvin * b / a
    t_fb_sig = t_fb_val * math.hypot(sig[0] / a, sb / b if b else 0.0)
    fit = FitResult({"a": Estimate(a, sig[0]), "gamma": Estimate(gamma, sig[1]),
                     "b": Estimate(b, sb), "T_fb": Estimate(t_fb_val, t_fb_sig)},
                    cov, resid, "apd_ringup_calibration",
                    extra={"degenerate": False, "t_fb": t_fb, "scatter": scatter})
    return ApdCalibration(_gain(a, t0_kelvin, stiffness), a, rescale), fit


def _gain(a, t0_kelvin, stiffness):
    return math.sqrt(a * (stiffness or 1.0) / (K_B * t0_kelvin))


# --- camera intensity profiles -------------------------------------------------

@dataclass
class IntensityProfile:
    """Line-summed camera image along the oscillation axis.

    Positions are pixel indices ``origin + arange(n)``; ``pixel_pitch`` (m per
    pixel) converts them to metres.
    """

    intensities: np.ndarray
    pixel_pitch: float = 1.0  # m / pixel
    origin: float = 0.0  # pixel coordinate of the first sample
    exposure: float = 0.0  # s
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        if not self.pixel_pitch > 0:
            raise ValueError("pixel pitch must be positive")

    def __len__(self):
        return self.intensities.size

    @property
    def positions(self):
        return self.origin + np.arange(self.intensities.size)

    @property
    def positions_m(self):
        return self.positions * self.pixel_pitch


PROFILE_PARAMS = ("I0", "z0", "w", "a", "b", "c")


@dataclass
class ProfileFit:
    """Fitted intensity-profile parameters, all in pixel units.

    ``d_model`` is the separation of the model maxima, ``d_pf`` the separation
    of the two major peaks found directly in the data (``None`` when fewer
    than two were found).
    """

    i0: float
    z0: float
    w: float
    amp_a: float
    slope_b: float
    offset_c: float
    sigmas: dict
    d_model: float
    d_pf: Optional[float]
    pixel_pitch: float = 1.0
    cost: float = 0.0
    amplitude_uncertainty: Optional[float] = None  # pixels, set-level

    @property
    def values(self):
        return dict(zip(PROFILE_PARAMS, (self.i0, self.z0, self.w, self.amp_a,
                                         self.slope_b, self.offset_c)))

    @property
    def amplitude_m(self):
        return self.amp_a * self.pixel_pitch

    @property
    def peak_mismatch(self):
        return None if self.d_pf is None else abs(self.d_model - self.d_pf)


def _arcsine_moments(x, z0, a, b):
    """Antiderivatives of rho(u) = (1 + b u) / sqrt(a^2 - u^2) and of u rho(u).

    ``u = x - z0`` is clipped to the support so differences give exact cell
    masses and first moments.
    """
    u = np.clip((x - z0) / a, -1.0, 1.0)
    asin = np.arcsin(u)
    root = np.sqrt(1.0 - u * u)
    f0 = asin - b * a * root
    f1 = -a * root + b * a * a * 0.5 * (asin - u * root)
    return f0, f1


def _oversample(w, step):
    # sub-cell pitch at most w/16 and never coarser than the output step
    return max(1, int(math.ceil(16 * step / w)))


def _gauss_kernels(w, h):
    half = int(math.ceil(5 * w / h))
    x = h * np.arange(-half, half + 1)
    k0 = np.exp(-2 * x * x / (w * w))
    # -dK/dx, applied to the first moment of each cell about its centre
    return k0, k0 * 4 * x / (w * w), half


def _smooth_cells(masses, moments, w, h, k, n_out, pad):
    k0, k1, half = _gauss_kernels(w, h)
    full = np.convolve(masses, k0, mode="full") + np.convolve(moments, k1, mode="full")
    # sub-grid index j sits at full index j + half
    idx = pad + half + k * np.arange(n_out)
    return full[idx]


def profile_model(x_start, n, step, i0, z0, w, a, b, c, oversample=None):
    """Model intensity at ``x_start + step * arange(n)`` (pixel units).

    The arcsine density is integrated exactly over sub-cells of pitch
    <= w/16 (mass and first moment), then convolved with exp(-2 u^2 / w^2)
    to first order in the in-cell offset. A fixed ``oversample`` keeps the
    model smooth in ``w`` while a fit is iterating.
    """
    if not (w > 0 and a > 0):
        return np.full(n, np.nan)
    k = oversample or _oversample(w, step)
    h = step / k
    pad = int(math.ceil(5 * w / h)) + k
    j = np.arange(-pad, k * (n - 1) + pad + 1)
    centres = x_start + h * j
    f0, f1 = _arcsine_moments(np.concatenate((centres - h / 2, centres[-1:] + h / 2)), z0, a, b)
    masses = np.diff(f0)
    moments = np.diff(f1) - (centres - z0) * masses
    return i0 * _smooth_cells(masses, moments, w, h, k, n, pad) + c


def render_profile(amp_a, z0, i0, w, slope_b, offset_c, n_pixels, pixel_pitch=1.0,
                   origin=0.0, exposure=0.0) -> IntensityProfile:
    """Synthesize a noise-free time-integrated profile on a pixel grid."""
    if not amp_a > 0:
        raise ValueError("amplitude must be positive")
    if not w > 0:
        raise ValueError("image width must be positive")
    if 1.0 > w / 4:
        raise ResolutionError(f"pixel pitch exceeds w/4 (w = {w} px)")
    lo, hi = origin, origin + n_pixels - 1
    if z0 - amp_a - 4 * w < lo or z0 + amp_a + 4 * w > hi:
        raise ValueError("pixel grid does not cover [z0 - a - 4w, z0 + a + 4w]")
    values = profile_model(origin, n_pixels, 1.0, i0, z0, w, amp_a, slope_b, offset_c)
    return IntensityProfile(values, pixel_pitch, origin, exposure,
                            {"truth": dict(zip(PROFILE_PARAMS,
                                               (i0, z0, w, amp_a, slope_b, offset_c)))})


def find_major_peaks(intensities, min_separation=1.0, prominence_fraction=0.05):
    """Indices of the two most prominent maxima, sorted by position.

    Peaks must rise at least ``prominence_fraction`` of the profile range
    above their surroundings and be ``min_separation`` samples apart.
    """
    y = np.asarray(intensities, dtype=float)
    rng_ = float(np.ptp(y))
    if rng_ == 0:
        return np.array([], dtype=int)
    peaks, props = find_peaks(y, prominence=prominence_fraction * rng_,
                              distance=max(1, int(round(min_separation))))
    if peaks.size <= 2:
        return np.sort(peaks)
    top = np.argsort(props["prominences"])[-2:]
    return np.sort(peaks[top])


def model_peak_separation(params, step=0.01):
    """Distance between the two maxima of the fitted model, in pixels."""
    i0, z0, w, a, b, c = params
    x0 = z0 - a - 2 * w
    n = int(math.ceil((2 * a + 4 * w) / step)) + 1
    y = profile_model(x0, n, step, i0, z0, w, a, b, c)
    x = x0 + step * np.arange(n)
    left, right = x < z0, x >= z0
    xl = x[left][np.argmax(y[left])]
    xr = x[right][np.argmax(y[right])]
    return float(xr - xl)


def _initial_guess(y, origin):
    base = float(np.percentile(y, 5))
    span = float(np.ptp(y))
    peaks = find_major_peaks(y, 2.0)
    if peaks.size == 2:
        p1, p2 = peaks
        a0 = 0.5 * (p2 - p1) * 1.1
        z00 = origin + 0.5 * (p1 + p2)
        # the outer flank of a peak is the bare image edge
        widths = peak_widths(y, peaks, rel_height=0.5)
        outer = 0.5 * ((p1 - widths[2][0]) + (widths[3][1] - p2))
        w0 = max(4.0, 1.5 * outer)
        h1, h2 = y[p1] - base, y[p2] - base
        b0 = (h2 - h1) / ((h1 + h2) * a0) if h1 + h2 > 0 else 0.0
    else:
        # single broad maximum: amplitude comparable to the image size
        p = int(np.argmax(y))
        above = np.flatnonzero(y - base > 0.5 * span)
        half = 0.5 * (above[-1] - above[0] + 1) if above.size else 4.0
        z00 = origin + p
        a0 = max(1.0, 0.5 * half)
        w0 = max(4.0, half)
        b0 = 0.0
    return _with_scale(y, base, z00, w0, a0, b0)


def _with_scale(y, base, z0, w, a, b):
    # peak of I0 * arcsine (*) Gaussian scales like I0 * w^(1/2) / a^(1/2)
    peak = float(np.max(y) - base)
    i0 = peak / (1.2 * math.sqrt(w / max(a, w)) + 1e-12)
    return np.array([i0, z0, w, a, b, base])


def _extra_guesses(y, first):
    """Other (a, w) splits of the same half-width, for an unresolved profile."""
    _, z0, w0, a0, _, base = first
    half = math.hypot(a0, 0.59 * w0)
    out = []
    for frac in (0.25, 0.75):
        a = max(1.0, frac * half)
        w = max(4.0, math.sqrt(max(half**2 - a**2, 1.0)) / 0.59)
        out.append(_with_scale(y, base, z0, w, a, 0.0))
    return out


def fit_profile(profile: IntensityProfile, initial=None, min_separation=None) -> ProfileFit:
    """Least-squares fit of the six-parameter convolution model.

    Levenberg-Marquardt via :func:`scipy.optimize.least_squares`, started
    from the peak positions unless ``initial`` (I0, z0, w, a, b, c) is given.
    When the two turning-point peaks are not resolved, a few amplitude/width
    splits of the observed width are tried and the lowest cost wins.
    """
    y = profile.intensities
    n = y.size
    if not np.all(np.isfinite(y)) or np.ptp(y) == 0:
        raise FitError("profile has no finite contrast", {"n": int(n)})
    if initial is not None:
        starts = [np.asarray(initial, dtype=float)]
    else:
        first = _initial_guess(y, profile.origin)
        starts = [first]
        if find_major_peaks(y, 2.0).size < 2:
            starts += _extra_guesses(y, first)

    def run(x0):
        k = _oversample(min(x0[2], 8.0), 1.0)
        for _ in range(3):
            def resid(p, k=k):
                return profile_model(profile.origin, n, 1.0, *p, oversample=k) - y

            try:
                sol = least_squares(resid, x0, method="lm", x_scale="jac", xtol=1e-12,
                                    ftol=1e-12, gtol=1e-12, max_nfev=4000)
            except ValueError as exc:
                raise FitError(f"profile fit failed: {exc}", {"initial": x0.tolist()}) from exc
            if not (sol.x[2] > 0 and _oversample(sol.x[2], 1.0) > k):
                break
            k, x0 = _oversample(sol.x[2], 1.0), sol.x
        return sol

    sols = [run(x0) for x0 in starts]
    good = [s for s in sols if s.success and np.all(np.isfinite(s.x)) and s.x[2] > 0 and s.x[3] > 0]
    sol = min(good, key=lambda s: s.cost) if good else sols[0]
    if not sol.success or not np.all(np.isfinite(sol.x)) or sol.x[2] <= 0 or sol.x[3] <= 0:
        raise FitError("profile fit did not converge",
                       {"last_iterate": sol.x.tolist(), "cost": float(sol.cost),
                        "message": sol.message})
    p = sol.x
    dof = max(1, n - p.size)
    s2 = 2 * sol.cost / dof
    try:
        cov = np.linalg.inv(sol.jac.T @ sol.jac) * s2
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        sig = np.full(p.size, np.nan)
    sep = min_separation if min_separation is not None else p[2]
    peaks = find_major_peaks(y, sep)
    d_pf = float(peaks[1] - peaks[0]) if peaks.size == 2 else None
    return ProfileFit(*p, sigmas=dict(zip(PROFILE_PARAMS, sig)),
                      d_model=model_peak_separation(p), d_pf=d_pf,
                      pixel_pitch=profile.pixel_pitch, cost=float(sol.cost))


def amplitude_uncertainty(fits: Sequence[ProfileFit], in_metres=True):
    """Set-level amplitude uncertainty, the mean |d_model - d_pf|.

    Profiles without two detectable peaks are skipped; returns ``None``
    when none qualify.
    """
    mism = [(f.peak_mismatch, f.pixel_pitch) for f in fits if f.peak_mismatch is not None]
    if not mism:
        return None
    vals = np.array([m * (pp if in_metres else 1.0) for m, pp in mism])
    return float(vals.mean())


def camera_frame_from_trace(trace: TimeTrace, exposure_start: float, exposure: float,
                            n_pixels: int, pixel_pitch: float, centre_px: float,
                            w: float, i0: float = 1.0, offset_c: float = 0.0,
                            slope_b: float = 0.0, omega: Optional[float] = None,
                            noise: float = 0.0, rng=None) -> IntensityProfile:
    """Time-integrated image of the particle over one exposure.

    The positions visited during the exposure are histogrammed on sub-pixel
    cells, weighted by the illumination 1 + b (z - centre), scaled so that a
    pure sinusoid reproduces :func:`render_profile`, and blurred by the
    Gaussian image. ``noise`` adds multiplicative Gaussian noise.
    """
    trace.require_unit("m")
    seg = trace.window(exposure_start, exposure_start + exposure)
    flags = {}
    if omega is not None and exposure * omega / (2 * math.pi) < 10:
        warnings.warn("camera exposure shorter than 10 oscillation periods", stacklevel=2)
        flags["short_exposure"] = True
    if 1.0 > w / 4:
        raise ResolutionError(f"pixel pitch exceeds w/4 (w = {w} px)")
    zpx = centre_px + seg.values[seg.mask()] / pixel_pitch
    k = _oversample(w, 1.0)
    h = 1.0 / k
    pad = int(math.ceil(5 * w / h)) + k
    j = np.arange(-pad, k * (n_pixels - 1) + pad + 1)
    edges = np.concatenate((j - 0.5, j[-1:] + 0.5)) * h
    weights = 1.0 + slope_b * (zpx - centre_px)
    counts, _ = np.histogram(zpx, bins=edges, weights=weights)
    first, _ = np.histogram(zpx, bins=edges, weights=weights * (zpx - centre_px))
    centres = j * h
    norm = math.pi / zpx.size
    masses = counts * norm
    moments = (first - (centres - centre_px) * counts) * norm
    values = i0 * _smooth_cells(masses, moments, w, h, k, n_pixels, pad) + offset_c
    if noise > 0:
        if rng is None:
            raise ValueError("image noise needs a random generator")
        values = values * (1 + noise * rng.standard_normal(values.size))
    return IntensityProfile(values, pixel_pitch, 0.0, exposure,
                            {"exposure_start": exposure_start, **flags})


def camera_amplitudes(squared_amplitudes, delta_a, rng, excess_fraction=0.0, excess_scale=1.0):
    """Camera-derived squared amplitudes with Delta-a level read-out error.

    Each amplitude receives Gaussian error of standard deviation ``delta_a``;
    a random ``excess_fraction`` of frames get ``excess_scale`` times that.
    """
    a = np.sqrt(np.asarray(squared_amplitudes, dtype=float))
    scale = np.full(a.size, float(delta_a))
    if excess_fraction > 0:
        hit = rng.random(a.size) < excess_fraction
        scale[hit] *= excess_scale
    meas = np.abs(a + scale * rng.standard_normal(a.size))
    return meas**2
