"""Damping and heating estimators: ring-down, ring-up, linear reheating,
the gamma = a P regression, and the residual diagnostic."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.optimize import curve_fit

from .constants import HBAR, K_B, TWO_PI
from .physics import Estimate
from .traces import FitError, FitResult, TimeTrace

# MSE / <sigma^2> above this marks a ring-down the exponential model does not capture
MSE_FLAG_RATIO = 3.0


def ringdown_fit(times, squared_amplitudes, delta_a=0.0, flag_ratio=MSE_FLAG_RATIO) -> FitResult:
    """Fit <z(t)^2> = <z(0)^2> exp(-gamma t) as a line in ln(z^2).

    Each point is weighted by its log-variance (2 delta_a / a_i)^2, or
    uniformly when ``delta_a`` is 0. Parameter errors are scaled by the
    reduced chi-square, so excess scatter widens them. The result carries
    ``gamma`` (1/s) and ``z0_sq`` (m^2); ``residuals`` are normalized by the
    fitted squared amplitude, and ``extra`` holds the MSE diagnostic.
    """
    t = np.asarray(times, dtype=float)
    sq = np.asarray(squared_amplitudes, dtype=float)
    if t.shape != sq.shape or t.ndim != 1:
        raise ValueError("times and squared amplitudes must be 1-D and the same length")
    if t.size < 3:
        raise ValueError("ring-down fit needs at least 3 points")
    if not np.all(sq > 0):
        raise ValueError("squared amplitudes must all be positive")
    if delta_a < 0:
        raise ValueError("delta_a must be non-negative")
    y = np.log(sq)
    if delta_a > 0:
        var = (2 * delta_a) ** 2 / sq
    else:
        var = np.ones_like(sq)
    w = 1.0 / np.sqrt(var)
    design = np.column_stack([np.ones_like(t), -t])
    coef, *_ = np.linalg.lstsq(design * w[:, None], y * w, rcond=None)
    log_resid = y - design @ coef
    dof = t.size - 2
    chi2 = float(np.sum(log_resid**2 / var))
    cov = np.linalg.inv((design * (w * w)[:, None]).T @ design)
    if dof > 0:
        cov = cov * chi2 / dof
    c, gamma = coef
    z0_sq = math.exp(c)
    sc, sg = np.sqrt(np.diag(cov))
    model = z0_sq * np.exp(-gamma * t)
    eps = (sq - model) / model
    fit = FitResult({"gamma": Estimate(gamma, sg), "z0_sq": Estimate(z0_sq, z0_sq * sc)},
                    cov, eps, "ringdown_log_linear",
                    measurement_variance=var if delta_a > 0 else None,
                    extra={"chi2": chi2, "delta_a": delta_a})
    if delta_a > 0 and dof > 0:
        mse, mean_var = residual_mse(fit, 2)
        fit.extra.update(mse=mse, mean_variance=mean_var, mse_ratio=mse / mean_var,
                         mse_flag=bool(mse / mean_var > flag_ratio))
    return fit


def residual_mse(fit: FitResult, n_params: int = 2):
    """(MSE, <sigma^2>) of a ring-down fit.

    MSE is the sum of squared normalized residuals over ``n - n_params``;
    <sigma^2> is the mean assumed log-variance (NaN without one).
    """
    eps = np.asarray(fit.residuals, dtype=float)
    n = eps.size
    if n <= n_params:
        raise ValueError(f"need more than {n_params} observations, got {n}")
    mse = float(np.sum(eps**2) / (n - n_params))
    var = fit.measurement_variance
    mean_var = float(np.mean(var)) if var is not None else math.nan
    return mse, mean_var


def _reheating_curve(t, gamma, ratio):
    return 1.0 + (ratio - 1.0) * np.exp(-gamma * t)


def _energy_points(mean_energy: TimeTrace, t0: float):
    if mean_energy.unit not in ("kT0", "1"):
        raise ValueError(f"energies must be in units of k_B T0, got {mean_energy.unit!r}")
    t = mean_energy.times
    y = mean_energy.values
    ok = mean_energy.mask() & np.isfinite(y) & (t >= t0 - 1e-9 * mean_energy.dt)
    return t[ok] - t0, y[ok], ok


def ringup_fit(mean_energy: TimeTrace, t_fb_kelvin: float, t0_kelvin: float = 300.0,
               start: float = 0.0, sigma=None) -> FitResult:
    """Fit <E>/k_B T0 = 1 + (T_fb/T0 - 1) exp(-gamma (t - start)) for gamma.

    ``T_fb`` is held fixed; only samples at or after ``start`` (the moment
    feedback is switched off) enter. ``sigma`` optionally gives per-bin
    standard errors, aligned with ``mean_energy``.
    """
    if not 0 < t_fb_kelvin < t0_kelvin:
        raise ValueError("need 0 < T_fb < T0")
    x, y, ok = _energy_points(mean_energy, start)
    if x.size < 2:
        raise FitError("ring-up fit needs at least 2 samples after feedback is off",
                       {"n": int(x.size)})
    ratio = t_fb_kelvin / t0_kelvin
    s = None if sigma is None else np.asarray(sigma, dtype=float)[ok]
    # starting guess from the first 1/e crossing toward equilibrium
    frac = (y - ratio) / (1 - ratio)
    hit = np.flatnonzero(frac > 1 - math.exp(-1))
    g0 = 1.0 / (x[hit[0]] if hit.size and x[hit[0]] > 0 else max(x[-1], mean_energy.dt))

    def model(tt, gamma):
        return _reheating_curve(tt, gamma, ratio)

    try:
        p, cov = curve_fit(model, x, y, p0=[g0], sigma=s, absolute_sigma=s is not None,
                           maxfev=10000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(f"ring-up fit did not converge: {exc}", {"gamma0": g0}) from exc
    if not np.all(np.isfinite(cov)):
        raise FitError("ring-up fit is degenerate (no curvature in gamma)",
                       {"gamma": float(p[0])})
    resid = y - model(x, *p)
    return FitResult({"gamma": Estimate(float(p[0]), float(math.sqrt(cov[0, 0])))},
                     cov, resid, "ringup_exponential",
                     extra={"T_fb": t_fb_kelvin, "T0": t0_kelvin, "start": start})


def heating_fit(mean_energy: TimeTrace, t_fb_kelvin: float, omega: float,
                t0_kelvin: float = 300.0, start: float = 0.0) -> FitResult:
    """Linearized reheating <E>/k_B T0 = T_fb/T0 + s (t - start).

    The intercept is held at ``T_fb``; the fitted slope ``s`` (1/s) gives
    the phonon heating rate Gamma = s k_B T0 / (hbar Omega). The 1 sigma
    comes from the residual scatter about the line.
    """
    if not t_fb_kelvin > 0:
        raise ValueError("T_fb must be positive")
    x, y, _ = _energy_points(mean_energy, start)
    if x.size < 2:
        raise FitError("heating fit needs at least 2 samples", {"n": int(x.size)})
    yy = y - t_fb_kelvin / t0_kelvin
    sxx = float(np.sum(x * x))
    if sxx == 0:
        raise FitError("heating fit needs samples after the start time", {})
    slope = float(np.sum(x * yy) / sxx)
    resid = yy - slope * x
    s2 = float(np.sum(resid**2) / (x.size - 1))
    s_sig = math.sqrt(s2 / sxx)
    scale = K_B * t0_kelvin / (HBAR * omega)
    return FitResult({"slope": Estimate(slope, s_sig),
                      "Gamma": Estimate(slope * scale, s_sig * scale)},
                     np.array([[s_sig**2]]), resid, "linear_reheating",
                     extra={"T_fb": t_fb_kelvin, "T0": t0_kelvin, "start": start})


def _tls_offset(lx, ly, w):
    # slope-1 line ly = lx + b; orthogonal distance (ly - lx - b)/sqrt(2)
    return float(np.sum(w * (ly - lx)) / np.sum(w))


def tls_pressure_fit(gammas, gamma_sigmas, pressures_mbar, pressure_sigmas,
                     birge=True) -> FitResult:
    """Fit gamma / 2pi = a P with slope one in log-log space.

    Every point's orthogonal distance to the line ln(gamma/2pi) = ln P + ln a
    is weighted by its combined relative uncertainty in both coordinates.
    With slope fixed at one the optimum is a weighted mean of
    ln(gamma/2pi) - ln P. The 1 sigma on ``a`` (Hz/mbar) is inflated by the
    Birge ratio when the scatter exceeds the quoted errors.
    """
    g = np.asarray(gammas, dtype=float)
    p = np.asarray(pressures_mbar, dtype=float)
    sg = np.broadcast_to(np.asarray(gamma_sigmas, dtype=float), g.shape)
    sp = np.broadcast_to(np.asarray(pressure_sigmas, dtype=float), p.shape)
    if g.shape != p.shape or g.size < 2:
        raise ValueError("need at least two (gamma, P) pairs of equal length")
    if not (np.all(g > 0) and np.all(p > 0)):
        raise ValueError("damping rates and pressures must be positive")
    if np.any(sg < 0) or np.any(sp < 0):
        raise ValueError("uncertainties must be non-negative")
    var = (sg / g) ** 2 + (sp / p) ** 2
    if np.all(var == 0):
        var = np.ones_like(var)
    elif np.any(var == 0):
        raise ValueError("uncertainties must be all zero or all non-zero")
    w = 1.0 / var
    lx, ly = np.log(p), np.log(g / TWO_PI)
    b = _tls_offset(lx, ly, w)
    resid = ly - lx - b
    sb = math.sqrt(1.0 / np.sum(w))
    chi2 = float(np.sum(w * resid**2))
    chi2_red = chi2 / (g.size - 1) if g.size > 1 else 0.0
    if birge:
        sb *= max(1.0, math.sqrt(chi2_red))
    a = math.exp(b)
    return FitResult({"a": Estimate(a, a * sb), "log_a": Estimate(b, sb)},
                     np.array([[sb**2]]), resid / math.sqrt(2), "tls_slope_one",
                     extra={"chi2": chi2, "chi2_red": chi2_red, "unit_a": "Hz/mbar"})


def tls_objective(log_a, log_x, log_y, weights):
    """Weighted sum of squared orthogonal distances to ly = lx + log_a."""
    d = (np.asarray(log_y) - np.asarray(log_x) - log_a) / math.sqrt(2)
    return float(np.sum(np.asarray(weights) * d * d))


def ensemble_energy(energies, t0_kelvin: float = 300.0, dt=None, start=0.0,
                    valid=None) -> tuple:
    """Mean energy (in k_B T0) over trajectories and its standard error.

    ``energies`` is an (n_traj, n_bins) array in joules; returns a
    :class:`TimeTrace` and the per-bin standard error.
    """
    e = np.asarray(energies, dtype=float) / (K_B * t0_kelvin)
    mean = np.nanmean(e, axis=0)
    sem = np.nanstd(e, axis=0, ddof=1) / math.sqrt(e.shape[0]) if e.shape[0] > 1 else np.zeros(e.shape[1])
    return TimeTrace(mean, dt, "kT0", start, "mean_energy", valid), sem


def heating_fit_ensemble(energies, dt: float, omega: float, start: float,
                         t0_kelvin: float = 300.0, valid=None, t_first: Optional[float] = None
                         ) -> FitResult:
    """Reheating rate from an ensemble, with a 1 sigma from trajectory scatter.

    ``energies`` is an (n_traj, n_bins) array in units of k_B T0, bins of
    width ``dt`` stamped at their centres (first at ``t_first``, default
    dt/2). Each trajectory's intercept is its own mean over the bins before
    ``start``; the slope of the ensemble mean equals the mean of the
    per-trajectory slopes, and its 1 sigma is their standard error. This
    accounts for the strong time correlation of the energy random walk,
    which the residual scatter of a single line does not.
    """
    e = np.asarray(energies, dtype=float)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("need an (n_traj >= 2, n_bins) array")
    t = (0.5 * dt if t_first is None else t_first) + dt * np.arange(e.shape[1])
    ok = np.ones(e.shape[1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    pre = ok & (t < start)
    post = ok & (t >= start - 1e-9 * dt)
    if not pre.any() or post.sum() < 2:
        raise FitError("need bins before and after the start time",
                       {"n_pre": int(pre.sum()), "n_post": int(post.sum())})
    x = t[post] - start
    sxx = float(np.sum(x * x))
    intercepts = e[:, pre].mean(axis=1)
    slopes = (e[:, post] - intercepts[:, None]) @ x / sxx
    slope = float(slopes.mean())
    s_sig = float(slopes.std(ddof=1) / math.sqrt(slopes.size))
    scale = K_B * t0_kelvin / (HBAR * omega)
    mean_line = e[:, post].mean(axis=0) - intercepts.mean()
    return FitResult({"slope": Estimate(slope, s_sig),
                      "Gamma": Estimate(slope * scale, s_sig * scale)},
                     np.array([[s_sig**2]]), mean_line - slope * x, "linear_reheating_ensemble",
                     extra={"T_fb": float(intercepts.mean() * t0_kelvin), "T0": t0_kelvin,
                            "start": start, "n_traj": int(slopes.size)})
