"""Report figures, rendered straight to PNG files.

Figures are built on the object-oriented Agg canvas, so nothing here
touches pyplot's global state and repeated renders are byte-identical.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_STYLE = {"linewidth": 1.2}
_SAVE = {"dpi": 110, "metadata": {"Software": None}}


def _figure(nrows=1, ncols=1, size=(6.0, 4.0)):
    fig = Figure(figsize=size, layout="constrained")
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    return fig, axes


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, format="png", **_SAVE)
    return path


def ringdown(times, measured_sq, fit, path, true_sq=None):
    """Squared amplitude against time on a log axis, with the fitted exponential."""
    fig, ax = _figure()
    ax = ax[0, 0]
    t_h = np.asarray(times) / 3600.0
    if true_sq is not None:
        ax.semilogy(t_h, true_sq, color="0.7", label="true", **_STYLE)
    ax.semilogy(t_h, measured_sq, "o", ms=3, label="measured")
    if fit is not None:
        g = fit.value("gamma")
        ax.semilogy(t_h, fit.value("z0_sq") * np.exp(-g * np.asarray(times)), "-",
                    label=f"fit, gamma/2pi = {g / (2 * math.pi):.3g} Hz", **_STYLE)
    ax.set_xlabel("time (h)")
    ax.set_ylabel("z^2 (m^2)")
    ax.legend(frameon=False)
    return _save(fig, path)


def energy_growth(trace, path, fit=None, sem=None, title="", model=None):
    """Mean energy in k_B T0 units against time with an optional fitted curve.

    ``model`` maps times to fitted energies; dark samples are drawn faint.
    """
    fig, ax = _figure()
    ax = ax[0, 0]
    t = trace.times
    lit = trace.mask()
    ax.plot(t[~lit], trace.values[~lit], ".", ms=2, color="0.8", label="dark")
    ax.plot(t[lit], trace.values[lit], ".", ms=3, label="measured")
    if sem is not None:
        ax.fill_between(t, trace.values - sem, trace.values + sem, color="C0", alpha=0.2, lw=0)
    if model is not None:
        ax.plot(t, model(t), "-", color="C3", label="fit", **_STYLE)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("energy (k_B T0)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def allan(result, path, reference=None):
    """Allan deviation with error bars on log-log axes."""
    fig, ax = _figure()
    ax = ax[0, 0]
    ax.errorbar(result.taus, result.sigma, yerr=result.error, fmt="o-", ms=3, capsize=2)
    if reference is not None:
        ax.axhline(reference, color="0.5", ls="--", lw=1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("tau (s)")
    ax.set_ylabel("Allan deviation")
    return _save(fig, path)


def frequency(series, path, drift=None):
    """Frequency offset from nominal against time, with the fitted drift."""
    fig, ax = _figure()
    ax = ax[0, 0]
    ok = series.valid
    df = series.frequencies - series.f_nominal
    ax.plot(series.times[ok], df[ok], ".", ms=2)
    if drift is not None:
        tc = series.times[ok]
        ax.plot(tc, np.mean(df[ok]) + drift.value * (tc - tc.mean()), "-", color="C3",
                label=f"drift {drift.value:.3g} Hz/s", **_STYLE)
        ax.legend(frameon=False)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("f - f_z (Hz)")
    return _save(fig, path)


def profile(prof, fit, path):
    """Camera intensity profile with the fitted convolution model."""
    from .detection import profile_model

    fig, ax = _figure()
    ax = ax[0, 0]
    x = prof.positions
    ax.plot(x, prof.intensities, ".", ms=3, label="profile")
    if fit is not None:
        p = fit.values.values()
        ax.plot(x, profile_model(x[0], x.size, 1.0, *p), "-", label="fit", **_STYLE)
    ax.set_xlabel("pixel")
    ax.set_ylabel("intensity (arb.)")
    ax.legend(frameon=False)
    return _save(fig, path)


def spectrum(freqs, density, path, unit="m^2/Hz", level=None):
    fig, ax = _figure()
    ax = ax[0, 0]
    ax.loglog(freqs[1:], density[1:], **_STYLE)
    if level is not None:
        ax.axhline(level, color="0.5", ls="--", lw=1)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel(f"PSD ({unit})")
    return _save(fig, path)


def position(trace, path, max_points=20000):
    fig, ax = _figure(size=(7.0, 3.0))
    ax = ax[0, 0]
    step = max(1, len(trace) // max_points)
    ax.plot(trace.times[::step], trace.values[::step], lw=0.5)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"{trace.name or 'value'} ({trace.unit})")
    return _save(fig, path)


def comparison(rows, path):
    """Computed / reference ratio per reproduction row, coloured by status."""
    rows = [r for r in rows if r.get("computed") is not None and r.get("reference")]
    fig, ax = _figure(size=(7.0, max(3.0, 0.22 * len(rows) + 1.0)))
    ax = ax[0, 0]
    colours = {"agree": "C2", "disagree": "C3", "flagged": "C1"}
    y = np.arange(len(rows))
    ratio = [r["computed"] / r["reference"] for r in rows]
    ax.scatter(ratio, y, c=[colours.get(r["status"], "0.5") for r in rows], s=14, zorder=3)
    ax.axvline(1.0, color="0.5", lw=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels([r["key"] for r in rows], fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("computed / reference")
    ax.invert_yaxis()
    return _save(fig, path)
