"""Declarative experiment scenarios: loading, validation and execution.

A scenario is a TOML file. Every key carrying a physical quantity names
its unit as a suffix (``pressure_mbar``, ``f_z_hz``, ``cadence_s``). The
top level holds ``name``, ``kind`` and ``seed``; the tables
``[particle]``, ``[environment]``, ``[simulation]``, ``[detection]`` and
``[output]`` configure the run; ``[[estimators]]`` entries form an ordered
chain of estimation steps, each naming its ``op`` plus parameters.

Running a scenario simulates the data, writes every series (CSV or
JSON), runs the estimator chain with per-step failure capture, and writes
``fits.json``, ``report.txt``, ``manifest.json`` and, optionally, PNG
figures. All randomness derives from ``seed``.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import analysis, detection, dynamics, protocols, spectral
from .constants import K_B, TWO_PI
from .dataio import write_json, write_series
from .physics import (Environment, InvalidInputError, ParticleSpec, force_psd_from_rate,
                      heating_rate_from_damping, quality_factor)
from .traces import FitError, FitResult, TimeTrace, _jsonable

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    """A scenario failed validation; ``problems`` lists every issue found."""

    def __init__(self, problems, source=None):
        self.problems = list(problems)
        self.source = source
        head = f"{source}: " if source else ""
        super().__init__(head + f"{len(self.problems)} problem(s):\n"
                         + "\n".join(f"  - {p}" for p in self.problems))


# --- schema -------------------------------------------------------------------

_REQUIRED = object()


@dataclass(frozen=True)
class Key:
    type: str  # float, int, str, bool, floats
    default: object = _REQUIRED
    check: str = ""  # positive, nonneg, fraction
    choices: tuple = ()


def _check_value(where, key, spec: Key, value, problems):
    t = spec.type
    if t == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif t == "int":
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif t == "bool":
        ok = isinstance(value, bool)
    elif t == "str":
        ok = isinstance(value, str)
    elif t == "floats":
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    else:  # pragma: no cover
        raise AssertionError(t)
    if not ok:
        problems.append(f"{where}.{key}: expected {t}, got {type(value).__name__}")
        return None
    if t == "float":
        value = float(value)
        if not math.isfinite(value):
            problems.append(f"{where}.{key}: must be finite")
            return None
    vals = value if t == "floats" else [value]
    if spec.check == "positive" and not all(v > 0 for v in vals):
        problems.append(f"{where}.{key}: must be positive, got {value}")
    elif spec.check == "nonneg" and not all(v >= 0 for v in vals):
        problems.append(f"{where}.{key}: must be non-negative, got {value}")
    elif spec.check == "fraction" and not all(0 <= v <= 1 for v in vals):
        problems.append(f"{where}.{key}: must lie in [0, 1], got {value}")
    if spec.choices and value not in spec.choices:
        problems.append(f"{where}.{key}: must be one of {list(spec.choices)}, got {value!r}")
    if t == "floats" and not value:
        problems.append(f"{where}.{key}: must not be empty")
    return value


def _section(where, raw, schema, problems):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append(f"{where}: expected a table")
        return {}
    out = {}
    for key in raw:
        if key not in schema:
            problems.append(f"{where}.{key}: unknown key (allowed: {', '.join(sorted(schema))})")
    for key, spec in schema.items():
        if key in raw:
            out[key] = _check_value(where, key, spec, raw[key], problems)
        elif spec.default is _REQUIRED:
            problems.append(f"{where}.{key}: required")
        else:
            out[key] = spec.default
    return out


PARTICLE_KEYS = {
    "mass_kg": Key("float", 4.3e-17, "positive"),
    "radius_m": Key("float", 150e-9, "positive"),
    "charge_e": Key("int", 300),
    "shape": Key("str", "dumbbell", choices=("sphere", "dumbbell")),
    "accommodation": Key("float", 0.9, "fraction"),
    "surface_temperature_K": Key("float", 300.0, "positive"),
}

ENVIRONMENT_KEYS = {
    "pressure_mbar": Key("float", 7e-11, "nonneg"),
    "gas_temperature_K": Key("float", 300.0, "positive"),
    "gas_molecule_mass_kg": Key("float", 3.34e-27, "positive"),
    "f_z_hz": Key("float", 1.28e3, "positive"),
    "electrode_distance_m": Key("float", 0.92e-3, "positive"),
    "electrode_resistivity_ohm_m": Key("float", 6.9e-7, "nonneg"),
}

OUTPUT_KEYS = {
    "format": Key("str", "csv", choices=("csv", "json")),
    "plots": Key("bool", True),
    "raw_traces": Key("bool", True),
}


@dataclass(frozen=True)
class KindSpec:
    simulation: dict
    detection: dict
    default_estimators: tuple


KINDS = {
    "ringdown": KindSpec(
        {"gamma_2pi_hz": Key("float", 59e-6, "positive"),
         "cadence_s": Key("float", 120.0, "positive"),
         "duration_s": Key("float", 7200.0, "positive"),
         "initial_amplitude_m": Key("float", 250e-6, "positive"),
         "repeats": Key("int", 1, "positive")},
        {"delta_a_m": Key("float", 3.9e-6, "nonneg"),
         "excess_fraction": Key("float", 0.0, "fraction"),
         "excess_scale": Key("float", 1.0, "positive")},
        ("ringdown_fit", "residual_mse")),
    "ringup": KindSpec(
        {"gamma_2pi_hz": Key("float", 37e-3, "positive"),
         "t_fb_K": Key("float", 1.0, "positive"),
         "n_traj": Key("int", 400, "positive"),
         "duration_s": Key("float", 10.0, "positive"),
         "t_switch_s": Key("float", 0.5, "positive"),
         "bin_s": Key("float", 0.1, "positive")},
        {"alpha_V_per_m": Key("float", 1e5, "positive"),
         "readout_noise_V2_per_hz": Key("float", 0.0, "nonneg")},
        ("calibrate_ringup", "ringup_fit")),
    "heating": KindSpec(
        {"total_rate_per_s": Key("float", 3.3e4, "positive"),
         "t_fb_K": Key("float", 0.8, "positive"),
         "n_traj": Key("int", 100, "positive"),
         "free_time_s": Key("float", 200.0, "positive"),
         "t_switch_s": Key("float", 5.0, "positive"),
         "bin_s": Key("float", 0.1, "positive"),
         "gamma_2pi_hz": Key("float", 69e-9, "nonneg")},
        {"strobe_on_s": Key("float", 0.5, "positive"),
         "strobe_period_s": Key("float", 20.0, "positive")},
        ("heating_fit",)),
    "allan": KindSpec(
        {"duration_s": Key("float", 4000.0, "positive"),
         "dt_s": Key("float", 0.1, "positive"),
         "white_sqrt_s": Key("float", 6.32e-6, "nonneg"),
         "random_walk_per_sqrt_s": Key("float", 3.16e-7, "nonneg"),
         "drift_hz_per_s": Key("float", 0.0)},
        {},
        ("allan_deviation", "drift_fit")),
    "pll": KindSpec(
        {"rate_hz_per_s": Key("float", 8e-8),
         "duration_s": Key("float", 600.0, "positive"),
         "samples_per_period": Key("int", 8, "positive")},
        {"amplitude_V": Key("float", 1.0, "positive"),
         "noise_psd_V2_per_hz": Key("float", 0.0, "nonneg")},
        ("pll_extract", "drift_fit")),
    "profiles": KindSpec(
        {"amplitudes_m": Key("floats", [100e-6], "positive")},
        {"pixel_pitch_m": Key("float", 2.7e-6, "positive"),
         "w_px": Key("float", 8.2, "positive"),
         "i0": Key("float", 2.1, "positive"),
         "offset_c": Key("float", 0.106, "nonneg"),
         "slope_b_per_px": Key("float", 1.0e-3),
         "noise": Key("float", 0.02, "nonneg")},
        ("profile_fit",)),
    "trajectory": KindSpec(
        {"gamma_2pi_hz": Key("float", None, "nonneg"),
         "dt_s": Key("float", None, "positive"),
         "duration_s": Key("float", 1.0, "positive"),
         "temperature_K": Key("float", 300.0, "nonneg"),
         "extra_rate_per_s": Key("float", 0.0, "nonneg"),
         "displacement_psd_m2_per_hz": Key("float", 0.0, "nonneg"),
         "feedback_gain_per_s": Key("float", 0.0, "nonneg"),
         "initial_temperature_K": Key("float", None, "nonneg")},
        {"alpha_V_per_m": Key("float", 0.0, "nonneg"),
         "readout_noise_V2_per_hz": Key("float", 0.0, "nonneg")},
        ("energy_series",)),
}


@dataclass
class Scenario:
    name: str
    kind: str
    seed: int
    particle: ParticleSpec
    env: Environment
    simulation: dict
    detection: dict
    estimators: list  # of (op, params)
    output: dict
    description: str = ""
    source: Optional[str] = None

    def with_seed(self, seed: int) -> "Scenario":
        return Scenario(self.name, self.kind, int(seed), self.particle, self.env,
                        dict(self.simulation), dict(self.detection), list(self.estimators),
                        dict(self.output), self.description, self.source)

    def with_estimators(self, entries) -> "Scenario":
        """Copy with the estimator chain replaced; ``entries`` as in the file."""
        problems = []
        chain = _parse_chain(self.kind, KINDS[self.kind], list(entries), problems)
        if problems:
            raise ConfigError(problems, self.source)
        out = self.with_seed(self.seed)
        out.estimators = chain
        return out


# --- estimator registry ----------------------------------------------------------

@dataclass
class StepRecord:
    op: str
    params: dict
    status: str = "ok"  # ok, failed, skipped
    summary: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)  # label -> FitResult
    error: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self):
        return {"op": self.op, "params": _jsonable(self.params), "status": self.status,
                "summary": _jsonable(self.summary),
                "fits": {k: v.to_dict() for k, v in self.fits.items()},
                "error": self.error, "diagnostics": _jsonable(self.diagnostics)}


@dataclass
class RunContext:
    scenario: Scenario
    data: object = None
    outputs: dict = field(default_factory=dict)  # stem -> series object
    figures: list = field(default_factory=list)  # (stem, callable(path))
    state: dict = field(default_factory=dict)  # values handed between steps
    records: list = field(default_factory=list)


@dataclass(frozen=True)
class EstimatorSpec:
    func: Callable
    kinds: tuple
    params: dict
    requires: dict = field(default_factory=dict)  # kind -> ops that must run first


ESTIMATORS: dict = {}


def estimator(name, kinds, params=None, requires=None):
    def deco(func):
        ESTIMATORS[name] = EstimatorSpec(func, tuple(kinds), params or {}, requires or {})
        return func
    return deco


def _t0(sc):
    return sc.env.gas_temperature


@estimator("ringdown_fit", ["ringdown"], {"flag_ratio": Key("float", analysis.MSE_FLAG_RATIO,
                                                                 "positive")})
def _est_ringdown(ctx, rec, p):
    sc = ctx.scenario
    truth = TWO_PI * sc.simulation["gamma_2pi_hz"]
    rows = {k: [] for k in ("repeat_1", "gamma_per_s", "gamma_sigma_per_s", "z0_sq_m2",
                            "mse_1", "mean_variance_1", "mse_ratio_1", "flag_1")}
    fits = []
    for i, d in enumerate(ctx.data):
        try:
            f = analysis.ringdown_fit(d.times, d.measured_squared, d.delta_a, p["flag_ratio"])
        except (ValueError, FitError) as exc:
            rec.diagnostics[f"repeat_{i}"] = str(exc)
            continue
        fits.append(f)
        rec.fits[f"repeat_{i}"] = f
        rows["repeat_1"].append(i)
        rows["gamma_per_s"].append(f.value("gamma"))
        rows["gamma_sigma_per_s"].append(f.sigma("gamma"))
        rows["z0_sq_m2"].append(f.value("z0_sq"))
        for col, key in (("mse_1", "mse"), ("mean_variance_1", "mean_variance"),
                         ("mse_ratio_1", "mse_ratio")):
            rows[col].append(f.extra.get(key, math.nan))
        rows["flag_1"].append(int(f.extra.get("mse_flag", False)))
    if not fits:
        raise FitError("no repeat could be fitted", rec.diagnostics)
    gammas = np.array(rows["gamma_per_s"])
    med = float(np.median(gammas))
    ctx.state["ringdown_fits"] = fits
    ctx.outputs["ringdown_fits"] = rows
    d0 = ctx.data[0]
    f0 = fits[0]
    ctx.outputs["ringdown_residuals"] = {"t_s": d0.times, "residual_1": f0.residuals}
    q = quality_factor(med, sc.env, float(np.median(rows["gamma_sigma_per_s"])))
    rec.summary.update(
        n_fitted=len(fits), gamma_median_per_s=med, gamma_2pi_median_hz=med / TWO_PI,
        gamma_sigma_per_s=float(np.median(rows["gamma_sigma_per_s"])),
        gamma_truth_per_s=truth, ratio_to_truth=med / truth, Q=q.q, Q_sigma=q.q_sigma,
        Qf_hz=q.qf)
    ctx.figures.append(("ringdown", lambda path: _plot().ringdown(
        d0.times, d0.measured_squared, f0, path, d0.true_squared)))


@estimator("residual_mse", ["ringdown"], {"n_params": Key("int", 2, "positive")},
           {"ringdown": ("ringdown_fit",)})
def _est_mse(ctx, rec, p):
    fits = ctx.state["ringdown_fits"]
    pairs = [analysis.residual_mse(f, p["n_params"]) for f in fits]
    mse = np.array([m for m, _ in pairs])
    var = np.array([v for _, v in pairs])
    flag_ratio = next((r.params.get("flag_ratio") for r in ctx.records
                       if r.op == "ringdown_fit"), analysis.MSE_FLAG_RATIO)
    ratio = mse / var
    rec.summary.update(mse_mean=float(mse.mean()), mean_variance_mean=float(var.mean()),
                       ratio_median=float(np.median(ratio)),
                       flagged=int(np.sum(ratio > flag_ratio)), n=int(mse.size),
                       flag_ratio=flag_ratio)


@estimator("calibrate_ringup", ["ringup"])
def _est_calibrate(ctx, rec, p):
    data = ctx.data
    t0 = _t0(ctx.scenario)
    cal, fit = detection.calibrate_ringup(data.variance, data.t_switch, t0,
                                          stiffness=data.stiffness)
    rec.fits["calibration"] = fit
    energy = data.variance.with_values(detection.variance_to_energy(data.variance.values, cal),
                                       unit="kT0", name="energy")
    ctx.state.update(calibration=cal, energy=energy,
                     energy_sem=detection.variance_to_energy(data.variance_sem, cal))
    ctx.outputs["energy"] = energy
    rec.summary.update(alpha_V_per_m=cal.alpha, alpha_truth_V_per_m=data.truth["alpha"],
                       a_V2=cal.variance_scale_a, T_fb_K=fit.value("T_fb"),
                       T_fb_sigma_K=fit.sigma("T_fb"), gamma_per_s=fit.value("gamma"),
                       degenerate=bool(fit.extra.get("degenerate")))


@estimator("ringup_fit", ["ringup"], {"t_fb_K": Key("float", None, "positive")},
           {"ringup": ("calibrate_ringup",)})
def _est_ringup(ctx, rec, p):
    sc = ctx.scenario
    t_fb = p["t_fb_K"] or sc.simulation["t_fb_K"]
    energy = ctx.state["energy"]
    fit = analysis.ringup_fit(energy, t_fb, _t0(sc), start=ctx.data.t_switch)
    rec.fits["ringup"] = fit
    truth = TWO_PI * sc.simulation["gamma_2pi_hz"]
    g = fit.value("gamma")
    rec.summary.update(gamma_per_s=g, gamma_sigma_per_s=fit.sigma("gamma"),
                       gamma_2pi_hz=g / TWO_PI, gamma_truth_per_s=truth,
                       ratio_to_truth=g / truth, T_fb_K=t_fb)
    ctx.state["ringup_gamma"] = g
    ratio = t_fb / _t0(sc)
    ts = ctx.data.t_switch
    sem = ctx.state["energy_sem"]
    ctx.figures.append(("ringup", lambda path: _plot().energy_growth(
        energy, path, sem=sem, title="ring-up",
        model=lambda t: np.where(t >= ts, 1 + (ratio - 1) * np.exp(-g * (t - ts)), ratio))))


@estimator("heating_fit", ["ringup", "heating"],
           {"strobe": Key("bool", False), "window_s": Key("float", 0.0, "nonneg")},
           {"ringup": ("calibrate_ringup",)})
def _est_heating(ctx, rec, p):
    sc = ctx.scenario
    t0 = _t0(sc)
    omega = sc.env.omega
    if sc.kind == "ringup":
        energy = ctx.state["energy"]
        start = ctx.data.t_switch
        stop = start + p["window_s"] if p["window_s"] > 0 else energy.times[-1] + energy.dt
        fit = analysis.heating_fit(energy.window(start, stop), sc.simulation["t_fb_K"], omega,
                                   t0, start=start)
        rec.fits["heating"] = fit
        g = ctx.state.get("ringup_gamma")
        rec.summary.update(Gamma_per_s=fit.value("Gamma"), Gamma_sigma_per_s=fit.sigma("Gamma"))
        if g is not None:
            # the linear fit sees (1 - T_fb/T0) gamma, so compare like with like
            lin = heating_rate_from_damping(g, t0, omega) * (1 - sc.simulation["t_fb_K"] / t0)
            rec.summary.update(Gamma_from_gamma_per_s=lin,
                               relative_difference=fit.value("Gamma") / lin - 1)
        return
    data = ctx.data
    fit = protocols.heating_estimate(data, p["strobe"], t0)
    label = "heating_strobe" if p["strobe"] else "heating"
    rec.fits[label] = fit
    truth = data.truth["Gamma"]
    rec.summary.update(Gamma_per_s=fit.value("Gamma"), Gamma_sigma_per_s=fit.sigma("Gamma"),
                       Gamma_truth_per_s=truth, ratio_to_truth=fit.value("Gamma") / truth,
                       T_fb_measured_K=fit.extra["T_fb"], strobe=p["strobe"])
    trace = data.mean_energy(p["strobe"])
    slope, c0, ts = fit.value("slope"), fit.extra["T_fb"] / t0, data.t_switch
    ctx.figures.append((label, lambda path: _plot().energy_growth(
        trace, path, title="stroboscopic reheating" if p["strobe"] else "reheating",
        model=lambda t: np.where(t >= ts, c0 + slope * (t - ts), c0))))


def _frequency(ctx):
    return ctx.state["frequency"]


@estimator("pll_extract", ["pll"],
           {"cutoff_hz": Key("float", 5.0, "positive"),
            "amplitude_threshold_V": Key("float", 0.0, "nonneg")})
def _est_pll(ctx, rec, p):
    f_z = ctx.scenario.env.secular_frequency
    series = spectral.pll_extract(ctx.data, f_z, p["cutoff_hz"],
                                  p["amplitude_threshold_V"] or None)
    ctx.state["frequency"] = series
    ctx.outputs["frequency"] = series
    rec.summary.update(n_samples=len(series), n_valid=int(series.valid.sum()),
                       interval_s=series.dt)


@estimator("allan_deviation", ["allan", "pll"], {"taus_s": Key("floats", [], "positive")},
           {"pll": ("pll_extract",)})
def _est_allan(ctx, rec, p):
    series = _frequency(ctx)
    span = series.times[-1] - series.times[0] + series.dt
    taus = p["taus_s"] or protocols.default_taus(span, series.dt)
    res = spectral.allan_deviation(series, taus)
    ctx.outputs["allan"] = res
    tau_min, sig_min = res.minimum()
    rec.summary.update(tau_min_s=tau_min, sigma_min=sig_min, n_taus=int(res.taus.size),
                       skipped=[t for t, _ in res.skipped])
    ctx.figures.append(("allan", lambda path: _plot().allan(res, path)))


@estimator("drift_fit", ["allan", "pll"], {}, {"pll": ("pll_extract",)})
def _est_drift(ctx, rec, p):
    series = _frequency(ctx)
    est = spectral.drift_fit(series)
    truth = ctx.scenario.simulation.get("rate_hz_per_s",
                                        ctx.scenario.simulation.get("drift_hz_per_s"))
    rec.summary.update(drift_hz_per_s=est.value, drift_sigma_hz_per_s=est.sigma,
                       drift_truth_hz_per_s=truth)
    if truth:
        rec.summary["ratio_to_truth"] = est.value / truth
    ctx.figures.append(("frequency", lambda path: _plot().frequency(series, path, est)))


@estimator("profile_fit", ["profiles"])
def _est_profile(ctx, rec, p):
    fits, cols = [], {k: [] for k in ("index_1", "amp_a_px", "amp_true_px", "w_px", "z0_px",
                                      "d_model_px", "d_pf_px")}
    pitch = ctx.scenario.detection["pixel_pitch_m"]
    for i, (prof, a_true) in enumerate(zip(ctx.data, ctx.scenario.simulation["amplitudes_m"])):
        try:
            f = detection.fit_profile(prof)
        except FitError as exc:
            rec.diagnostics[f"profile_{i}"] = {"error": str(exc), **exc.diagnostics}
            continue
        fits.append(f)
        cols["index_1"].append(i)
        cols["amp_a_px"].append(f.amp_a)
        cols["amp_true_px"].append(a_true / pitch)
        cols["w_px"].append(f.w)
        cols["z0_px"].append(f.z0)
        cols["d_model_px"].append(f.d_model)
        cols["d_pf_px"].append(math.nan if f.d_pf is None else f.d_pf)
    if not fits:
        raise FitError("no profile could be fitted", rec.diagnostics)
    ctx.outputs["profile_fits"] = cols
    da = detection.amplitude_uncertainty(fits)
    bias = np.array(cols["amp_a_px"]) - np.array(cols["amp_true_px"])
    rec.summary.update(n_fitted=len(fits), n_failed=len(ctx.data) - len(fits),
                       delta_a_m=da, mean_amplitude_bias_m=float(bias.mean() * pitch))
    prof0, fit0 = ctx.data[cols["index_1"][0]], fits[0]
    ctx.figures.append(("profile", lambda path: _plot().profile(prof0, fit0, path)))


@estimator("energy_series", ["trajectory"], {"bin_s": Key("float", 0.1, "positive")})
def _est_energy(ctx, rec, p):
    traj = ctx.data
    e = dynamics.energy_series(traj.position(), p["bin_s"], traj.mass, traj.omega)
    ctx.outputs["energy"] = e
    kt = K_B * ctx.scenario.simulation["temperature_K"]
    ok = e.mask() & np.isfinite(e.values)
    rec.summary.update(mean_energy_J=float(e.values[ok].mean()),
                       mean_energy_kT=float(e.values[ok].mean() / kt) if kt > 0 else math.nan)


@estimator("psd", ["trajectory"], {"segment_s": Key("float", 0.1, "positive")})
def _est_psd(ctx, rec, p):
    trace = ctx.data.position()
    f, s = spectral.psd(trace, p["segment_s"])
    ctx.outputs["psd"] = {"f_Hz": f, "psd_m2_per_Hz": s}
    df = f[1] - f[0]
    rec.summary.update(variance_m2=float(np.var(trace.values)),
                       integrated_psd_m2=float(np.sum(s) * df),
                       peak_hz=float(f[int(np.argmax(s))]))
    ctx.figures.append(("psd", lambda path: _plot().spectrum(f, s, path)))


def _plot():
    from . import plotting
    return plotting


# --- parsing -----------------------------------------------------------------------

def parse_scenario(raw: dict, source=None) -> Scenario:
    """Validate a scenario mapping; raises :class:`ConfigError` listing every problem."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["scenario must be a table"], source)
    top = {"name", "kind", "seed", "description", "particle", "environment", "simulation",
           "detection", "estimators", "output"}
    for key in raw:
        if key not in top:
            problems.append(f"{key}: unknown top-level key")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        problems.append("name: required non-empty string")
    kind = raw.get("kind")
    if kind not in KINDS:
        problems.append(f"kind: must be one of {sorted(KINDS)}, got {kind!r}")
    seed = raw.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("seed: required non-negative integer")
    particle = _section("particle", raw.get("particle"), PARTICLE_KEYS, problems)
    environment = _section("environment", raw.get("environment"), ENVIRONMENT_KEYS, problems)
    output = _section("output", raw.get("output"), OUTPUT_KEYS, problems)
    spec = KINDS.get(kind)
    simulation = detection_cfg = {}
    chain = []
    if spec is not None:
        simulation = _section("simulation", raw.get("simulation"), spec.simulation, problems)
        detection_cfg = _section("detection", raw.get("detection"), spec.detection, problems)
        chain = _parse_chain(kind, spec, raw.get("estimators", _REQUIRED), problems)
        problems.extend(_kind_problems(kind, simulation, detection_cfg))
    part = env = None
    if not any(p.startswith(("particle.", "environment.")) for p in problems):
        try:
            part = ParticleSpec(particle["mass_kg"], particle["radius_m"], particle["charge_e"],
                                particle["shape"], particle["accommodation"],
                                particle["surface_temperature_K"])
            env = Environment.from_mbar(
                environment["pressure_mbar"], gas_temperature=environment["gas_temperature_K"],
                gas_molecule_mass=environment["gas_molecule_mass_kg"],
                secular_frequency=environment["f_z_hz"],
                electrode_distance=environment["electrode_distance_m"],
                electrode_resistivity=environment["electrode_resistivity_ohm_m"])
        except InvalidInputError as exc:
            problems.append(str(exc))
        t_fb = simulation.get("t_fb_K")
        if kind in ("ringup", "heating") and t_fb is not None and env is not None:
            if not t_fb < env.gas_temperature:
                problems.append("simulation.t_fb_K: feedback temperature must lie below "
                                "environment.gas_temperature_K")
    if problems:
        raise ConfigError(problems, source)
    return Scenario(name, kind, seed, part, env, simulation, detection_cfg, chain, output,
                    raw.get("description", ""), None if source is None else str(source))


def _parse_chain(kind, spec, raw, problems):
    if raw is _REQUIRED:
        return [(op, _section(f"estimators.{op}", {}, ESTIMATORS[op].params, []))
                for op in spec.default_estimators]
    if not isinstance(raw, list):
        problems.append("estimators: expected an array of tables")
        return []
    chain, seen = [], []
    for i, entry in enumerate(raw):
        where = f"estimators[{i}]"
        if not isinstance(entry, dict) or "op" not in entry:
            problems.append(f"{where}: each entry needs an 'op'")
            continue
        op = entry["op"]
        est = ESTIMATORS.get(op)
        if est is None:
            problems.append(f"{where}.op: unknown estimator {op!r} (known: {sorted(ESTIMATORS)})")
            continue
        if kind not in est.kinds:
            allowed = sorted(n for n, e in ESTIMATORS.items() if kind in e.kinds)
            problems.append(f"{where}.op: {op!r} does not accept {kind} data (use one of {allowed})")
            continue
        for need in est.requires.get(kind, ()):
            if need not in seen:
                problems.append(f"{where}.op: {op!r} needs an earlier {need!r} step")
        params = {k: v for k, v in entry.items() if k != "op"}
        chain.append((op, _section(f"{where}", params, est.params, problems)))
        seen.append(op)
    return chain


def _kind_problems(kind, sim, det):
    out = []
    if kind == "ringup" and sim.get("t_switch_s") is not None and sim.get("duration_s") is not None:
        if not sim["t_switch_s"] < sim["duration_s"]:
            out.append("simulation.t_switch_s: must be shorter than duration_s")
    if kind == "ringdown" and None not in (sim.get("cadence_s"), sim.get("duration_s")):
        if sim["duration_s"] < 2 * sim["cadence_s"]:
            out.append("simulation.duration_s: must span at least three frames")
    if kind == "heating" and None not in (det.get("strobe_on_s"), det.get("strobe_period_s")):
        if not det["strobe_on_s"] < det["strobe_period_s"]:
            out.append("detection.strobe_on_s: must be shorter than strobe_period_s")
    return out


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file."""
    path = Path(path)
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError([f"TOML syntax: {exc}"], path) from None
    return parse_scenario(raw, path)


def bundled_scenarios() -> dict:
    """Names and paths of the scenarios shipped with the package."""
    root = Path(__file__).with_name("scenarios")
    return {p.stem: p for p in sorted(root.glob("*.toml"))}


def resolve_scenario(name_or_path) -> Path:
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = bundled_scenarios()
    if str(name_or_path) in bundled:
        return bundled[str(name_or_path)]
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")


# --- data stage ----------------------------------------------------------------------

def _data_ringdown(sc: Scenario, ctx: RunContext):
    sim, det = sc.simulation, sc.detection
    data = [protocols.ringdown_data(
        TWO_PI * sim["gamma_2pi_hz"], sim["cadence_s"], sim["duration_s"],
        sim["initial_amplitude_m"], det["delta_a_m"], sc.particle, sc.env, sc.seed, i,
        det["excess_fraction"], det["excess_scale"], _t0(sc)) for i in range(sim["repeats"])]
    table = {"t_s": data[0].times, "z2_true_m2": data[0].true_squared}
    for i, d in enumerate(data):
        table[f"z2_r{i:02d}_m2"] = d.measured_squared
    ctx.outputs["ringdown"] = table
    return data


def _data_ringup(sc, ctx):
    sim, det = sc.simulation, sc.detection
    data = protocols.ringup_data(
        TWO_PI * sim["gamma_2pi_hz"], sim["t_fb_K"], sim["n_traj"], sim["duration_s"],
        sim["t_switch_s"], sim["bin_s"], sc.particle, sc.env, det["alpha_V_per_m"],
        det["readout_noise_V2_per_hz"], sc.seed, _t0(sc))
    ctx.outputs["apd_variance"] = data.variance
    ctx.outputs["apd_variance_sem"] = {"t_s": data.variance.times,
                                       "variance_sem_V2": data.variance_sem}
    return data


def _data_heating(sc, ctx):
    sim, det = sc.simulation, sc.detection
    data = protocols.heating_data(
        sim["total_rate_per_s"], sim["t_fb_K"], sim["n_traj"], sim["free_time_s"],
        sim["t_switch_s"], sim["bin_s"], det["strobe_on_s"], det["strobe_period_s"],
        sc.particle, sc.env, TWO_PI * sim["gamma_2pi_hz"], sc.seed, _t0(sc))
    ctx.outputs["energy"] = data.mean_energy(False)
    ctx.outputs["energy_strobe"] = data.mean_energy(True)
    return data


def _data_allan(sc, ctx):
    sim = sc.simulation
    series = protocols.frequency_record(sim["duration_s"], sim["dt_s"], sc.env.secular_frequency,
                                        sim["white_sqrt_s"], sim["random_walk_per_sqrt_s"],
                                        sim["drift_hz_per_s"], sc.seed)
    ctx.state["frequency"] = series
    ctx.outputs["frequency"] = series
    return series


def _data_pll(sc, ctx):
    sim, det = sc.simulation, sc.detection
    trace = protocols.chirp_trace(sim["rate_hz_per_s"], sim["duration_s"],
                                  sc.env.secular_frequency, det["amplitude_V"],
                                  sim["samples_per_period"], det["noise_psd_V2_per_hz"], sc.seed)
    if sc.output["raw_traces"]:
        ctx.outputs["apd"] = trace
    return trace


def _data_profiles(sc, ctx):
    det = sc.detection
    profiles = protocols.profile_set(sc.simulation["amplitudes_m"], det["pixel_pitch_m"],
                                     det["w_px"], det["i0"], det["offset_c"],
                                     det["slope_b_per_px"], det["noise"], sc.seed)
    for i, prof in enumerate(profiles):
        ctx.outputs[f"profile_{i:02d}"] = prof
    return profiles


def _data_trajectory(sc, ctx):
    sim, det = sc.simulation, sc.detection
    noise = []
    if sim["temperature_K"] > 0:
        noise.append(dynamics.Thermal(sim["temperature_K"]))
    if sim["extra_rate_per_s"] > 0:
        noise.append(dynamics.WhiteForce(force_psd_from_rate(
            sim["extra_rate_per_s"], sc.particle.mass, sc.env.omega)))
    if sim["displacement_psd_m2_per_hz"] > 0:
        noise.append(dynamics.Displacement(sim["displacement_psd_m2_per_hz"]))
    cfg = dynamics.SimConfig(
        sc.particle, sc.env,
        gamma=None if sim["gamma_2pi_hz"] is None else TWO_PI * sim["gamma_2pi_hz"],
        dt=sim["dt_s"], duration=sim["duration_s"], seed=sc.seed,
        noise_sources=noise,
        feedback=dynamics.FeedbackConfig(sim["feedback_gain_per_s"])
        if sim["feedback_gain_per_s"] > 0 else None,
        initial_temperature=sim["initial_temperature_K"])
    traj = dynamics.simulate_trajectory(cfg)
    pos = traj.position()
    if sc.output["raw_traces"]:
        ctx.outputs["position"] = pos
        if det["alpha_V_per_m"] > 0:
            rng = dynamics.derive_rng(sc.seed, 0, dynamics.STREAM_MEASUREMENT)
            ctx.outputs["apd"] = detection.apd_trace(pos, det["alpha_V_per_m"],
                                                     det["readout_noise_V2_per_hz"], rng)
    ctx.figures.append(("position", lambda path: _plot().position(pos, path)))
    ctx.state["gamma"] = cfg.gamma
    return traj


_DATA = {"ringdown": _data_ringdown, "ringup": _data_ringup, "heating": _data_heating,
         "allan": _data_allan, "pll": _data_pll, "profiles": _data_profiles,
         "trajectory": _data_trajectory}


# --- execution -------------------------------------------------------------------------

@dataclass
class RunResult:
    scenario: Scenario
    out_dir: Path
    records: list
    files: dict  # relative name -> sha256 of numeric outputs
    figures: list
    digest: str

    @property
    def ok(self):
        return all(r.status == "ok" for r in self.records)

    def record(self, op) -> StepRecord:
        for r in self.records:
            if r.op == op:
                return r
        raise KeyError(op)


def run_scenario(scenario, out_dir, seed: Optional[int] = None, fmt: Optional[str] = None,
                 plots: Optional[bool] = None, estimate: bool = True) -> RunResult:
    """Execute a scenario and write its artifact bundle to ``out_dir``.

    ``scenario`` is a :class:`Scenario`, a path or a bundled scenario name.
    ``seed``, ``fmt`` and ``plots`` override the file. With ``estimate`` false,
    or an empty estimator chain, only the simulated series are written. A
    failing step is recorded with its error and diagnostics; steps that
    depend on it are skipped, independent steps still run.
    """
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(resolve_scenario(scenario))
    if seed is not None:
        scenario = scenario.with_seed(seed)
    fmt = fmt or scenario.output["format"]
    plots = scenario.output["plots"] if plots is None else plots
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ctx = RunContext(scenario)
    ctx.data = _DATA[scenario.kind](scenario, ctx)
    if estimate:
        failed = set()
        for op, params in scenario.estimators:
            rec = StepRecord(op, dict(params))
            needs = ESTIMATORS[op].requires.get(scenario.kind, ())
            blocked = [n for n in needs if n in failed]
            if blocked:
                rec.status = "skipped"
                rec.error = f"depends on failed step(s) {blocked}"
                failed.add(op)
            else:
                try:
                    ESTIMATORS[op].func(ctx, rec, params)
                except (FitError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                    rec.status = "failed"
                    rec.error = f"{type(exc).__name__}: {exc}"
                    rec.diagnostics.update(getattr(exc, "diagnostics", {}))
                    failed.add(op)
            ctx.records.append(rec)

    files = {}
    for stem, obj in ctx.outputs.items():
        path = write_series(obj, out / f"{stem}.{fmt}", fmt)
        files[path.name] = _sha256(path)
    fits_path = write_json(out / "fits.json", {"scenario": scenario.name, "seed": scenario.seed,
                                               "steps": [r.to_dict() for r in ctx.records]})
    files[fits_path.name] = _sha256(fits_path)
    digest = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(files.items()))
                            .encode()).hexdigest()
    figures = []
    if plots:
        for stem, draw in ctx.figures:
            figures.append(draw(out / f"{stem}.png").name)
    result = RunResult(scenario, out, ctx.records, files, figures, digest)
    (out / "report.txt").write_text(render_report(result))
    write_json(out / "manifest.json", {"digest": digest, "files": files, "figures": figures})
    return result


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt_value(v):
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    return str(v)


def render_report(result: RunResult) -> str:
    sc = result.scenario
    lines = [f"scenario: {sc.name}", f"kind: {sc.kind}", f"seed: {sc.seed}"]
    if sc.description:
        lines.append(f"description: {sc.description}")
    lines.append(f"pressure_mbar: {_fmt_value(sc.env.pressure_mbar)}")
    lines.append(f"f_z_hz: {_fmt_value(sc.env.secular_frequency)}")
    lines.append("")
    lines.append("simulation:")
    lines.extend(f"  {k} = {_fmt_value(v)}" for k, v in sc.simulation.items())
    if sc.detection:
        lines.append("detection:")
        lines.extend(f"  {k} = {_fmt_value(v)}" for k, v in sc.detection.items())
    lines.append("")
    if not result.records:
        lines.append("estimators: none (series only)")
    for rec in result.records:
        lines.append(f"[{rec.status}] {rec.op}")
        if rec.error:
            lines.append(f"  error: {rec.error}")
        for k, v in rec.summary.items():
            lines.append(f"  {k} = {_fmt_value(v)}")
        for label, fit in rec.fits.items():
            if len(rec.fits) > 3 and label not in ("repeat_0",):
                continue
            for name, est in fit.params.items():
                lines.append(f"  {label}.{name} = {_fmt_value(est.value)} +/- {_fmt_value(est.sigma)}")
    if sc.kind == "ringdown" and result.records:
        lines.append("")
        lines.append(_mse_table(result))
    lines.append("")
    lines.append("outputs:")
    lines.extend(f"  {name}  sha256={h[:16]}" for name, h in sorted(result.files.items()))
    lines.extend(f"  {name}  (figure)" for name in result.figures)
    lines.append(f"digest: {result.digest}")
    return "\n".join(lines) + "\n"


def _mse_table(result):
    try:
        fits = [f for label, f in result.record("ringdown_fit").fits.items()]
    except KeyError:
        return ""
    rows = ["repeat  gamma/2pi (Hz)     <sigma^2>    MSE          MSE/<sigma^2>  flag"]
    for i, f in enumerate(fits):
        rows.append(f"{i:6d}  {f.value('gamma') / TWO_PI:<17.6g}  "
                    f"{f.extra.get('mean_variance', math.nan):<11.4g}  "
                    f"{f.extra.get('mse', math.nan):<11.4g}  "
                    f"{f.extra.get('mse_ratio', math.nan):<13.4g}  "
                    f"{'yes' if f.extra.get('mse_flag') else 'no'}")
    return "\n".join(rows)
