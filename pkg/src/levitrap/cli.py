"""Command-line entry point: ``levitrap <subcommand> [options]``.

Fit subcommands either analyse a data file given with ``--input`` or, without
one, simulate a scenario (``--config``, else a bundled default) and run only
that estimator on it. Every run writes its tables, ``fits.json``, a text
report and PNG figures into ``--out-dir``.

Exit codes: 0 success, 2 invalid configuration or input, 3 a fit failed,
4 a file could not be read or written.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, detection, physics, spectral
from .constants import TWO_PI
from .dataio import ParseError, import_trace, read_table, write_json, write_series
from .physics import InvalidInputError
from .scenario import (ConfigError, bundled_scenarios, load_scenario, render_report,
                       resolve_scenario, run_scenario)
from .traces import FitError, TimeTrace

EXIT_OK, EXIT_CONFIG, EXIT_FIT, EXIT_IO = 0, 2, 3, 4

# subcommand -> (bundled scenario, estimator chain) used without --input
_SCENARIO_FITS = {
    "ringdown-fit": ("ringdown_P2", ["ringdown_fit", "residual_mse"]),
    "ringup-fit": ("ringup_P1", ["calibrate_ringup", "ringup_fit"]),
    "heating-fit": ("heating_P4", ["heating_fit"]),
    "allan": ("allan_P4", ["allan_deviation", "drift_fit"]),
    "pll": ("pll_drift", ["pll_extract", "drift_fit"]),
    "profile-fit": ("profiles_P2", ["profile_fit"]),
}


def _common(p, config=True):
    if config:
        p.add_argument("--config", help="scenario TOML file or bundled scenario name")
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--out-dir", default="levitrap-out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), help="series output format")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levitrap", description=__doc__.split("\n\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a scenario and write its series only")
    p.add_argument("scenario", nargs="?", help="scenario file or bundled name")
    _common(p)
    p = sub.add_parser("run", help="simulate a scenario and run its estimator chain")
    p.add_argument("scenario", nargs="?", help="scenario file or bundled name")
    _common(p)
    sub.add_parser("scenarios", help="list bundled scenarios")

    p = sub.add_parser("ringdown-fit", help="exponential fit to squared amplitudes")
    p.add_argument("--input", help="CSV with t_s and one or more z2_*_m2 columns")
    p.add_argument("--delta-a-m", type=float, default=0.0, help="amplitude uncertainty (m)")
    _common(p)
    p = sub.add_parser("ringup-fit", help="calibrate and fit an APD ring-up")
    p.add_argument("--input", help="trace CSV/JSON of the mean APD variance (V2)")
    p.add_argument("--t-fb-K", type=float, default=1.0, dest="t_fb", help="feedback temperature")
    p.add_argument("--t-switch-s", type=float, default=0.5, help="feedback switch-off time")
    p.add_argument("--stiffness-N-per-m", type=float, dest="stiffness",
                   help="m Omega^2; gives the gain in V/m")
    p.add_argument("--t0-K", type=float, default=300.0, dest="t0")
    _common(p)
    p = sub.add_parser("heating-fit", help="linear reheating fit to a mean-energy trace")
    p.add_argument("--input", help="trace of mean energy in k_B T0 (column E_kT0)")
    p.add_argument("--t-fb-K", type=float, default=0.8, dest="t_fb")
    p.add_argument("--t-switch-s", type=float, default=0.0)
    p.add_argument("--f-z-hz", type=float, default=1.28e3)
    p.add_argument("--t0-K", type=float, default=300.0, dest="t0")
    _common(p)
    p = sub.add_parser("tls-fit", help="damping coefficient from (pressure, gamma) points")
    p.add_argument("--input", help="CSV with gamma_Hz, gammasigma_Hz, pressure_mbar, "
                                   "pressuresigma_mbar (gamma as gamma/2pi)")
    p.add_argument("--pressure-rel-sigma", type=float, default=0.2,
                   help="relative pressure 1 sigma for the built-in points")
    _common(p, config=False)
    p = sub.add_parser("allan", help="Allan deviation of a frequency record")
    p.add_argument("--input", help="CSV with t_s,f_Hz[,valid_1]")
    p.add_argument("--f-z-hz", type=float, help="nominal frequency (default: record mean)")
    p.add_argument("--taus-s", type=float, nargs="+", help="averaging times")
    _common(p)
    p = sub.add_parser("pll", help="instantaneous frequency from an oscillating trace")
    p.add_argument("--input", help="trace CSV/JSON of the detector signal")
    p.add_argument("--f-z-hz", type=float, default=1.28e3)
    p.add_argument("--cutoff-hz", type=float, default=5.0)
    _common(p)
    p = sub.add_parser("profile-fit", help="fit camera intensity profiles")
    p.add_argument("--input", nargs="+", help="profile files (CSV, JSON or binary)")
    _common(p)

    p = sub.add_parser("noise-budget", help="noise spectra equivalent to a heating rate")
    p.add_argument("--rate-per-s", type=float, default=3.1e4)
    p.add_argument("--mass-kg", type=float, default=4.3e-17)
    p.add_argument("--charge-e", type=int, default=300)
    p.add_argument("--distance-m", type=float, default=0.92e-3)
    p.add_argument("--f-z-hz", type=float, default=1.28e3)
    _common(p, config=False)
    p = sub.add_parser("damping-theory", help="free-molecular gas damping coefficient")
    p.add_argument("--mass-kg", type=float, default=4.3e-17)
    p.add_argument("--radius-m", type=float, default=150e-9)
    p.add_argument("--shape", choices=("sphere", "dumbbell"), default="dumbbell")
    p.add_argument("--accommodation", type=float, default=0.9)
    p.add_argument("--gas-temperature-K", type=float, default=300.0, dest="t_gas")
    p.add_argument("--pressure-mbar", type=float, help="also report the damping rate")
    _common(p, config=False)

    p = sub.add_parser("reproduce-paper", help="compare computed values with the reference table")
    p.add_argument("--quick", action="store_true", help="smaller ensembles")
    p.add_argument("--closed-form-only", action="store_true")
    _common(p, config=False)

    p = sub.add_parser("import", help="read an external data file and re-emit it")
    p.add_argument("path")
    p.add_argument("--mapping", help="JSON object renaming source columns to <name>_<unit>")
    _common(p, config=False)
    p = sub.add_parser("export", help="convert a trace or profile file to another format")
    p.add_argument("path")
    p.add_argument("output")
    p.add_argument("--to", choices=("csv", "json", "bin"), help="default: output suffix")
    return ap


# --- helpers ----------------------------------------------------------------------

def _out(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(args, out, name, payload, text, figures=()):
    """Write ``<name>.json`` and ``<name>.txt`` and print the text."""
    write_json(out / f"{name}.json", payload)
    (out / f"{name}.txt").write_text(text)
    if not getattr(args, "no_plots", False):
        for draw in figures:
            draw()
    print(text, end="")
    return EXIT_OK


def _fit_lines(fit):
    lines = []
    for k, est in fit.params.items():
        lines.append(f"  {k} = {est.value:.6g} +/- {est.sigma:.3g}")
    return lines


def _scenario_fit(args):
    default, chain = _SCENARIO_FITS[args.command]
    sc = load_scenario(resolve_scenario(args.config or default))
    sc = sc.with_estimators([{"op": op} for op in chain])
    result = run_scenario(sc, args.out_dir, seed=args.seed, fmt=args.format,
                          plots=False if args.no_plots else None)
    print(render_report(result), end="")
    return EXIT_OK if result.ok else EXIT_FIT


# --- file-input fits --------------------------------------------------------------

def _ringdown_file(args, out):
    table = read_table(args.input)
    if "t_s" not in table:
        raise ParseError("ring-down table needs a t_s column", args.input)
    cols = [k for k in table if k.startswith("z2") and k.endswith("_m2") and k != "z2_true_m2"]
    if not cols:
        raise ParseError("ring-down table needs a z2_*_m2 column", args.input)
    t = table["t_s"]
    payload, lines, figs = {}, [], []
    for c in cols:
        fit = analysis.ringdown_fit(t, table[c], args.delta_a_m)
        mse, sig2 = analysis.residual_mse(fit)
        payload[c] = fit.to_dict()
        lines.append(f"{c}: gamma/2pi = {fit.value('gamma') / TWO_PI:.4g} +/- "
                     f"{fit.sigma('gamma') / TWO_PI:.2g} Hz, MSE = {mse:.3g}, "
                     + (f"<sigma^2> = {sig2:.3g}" if args.delta_a_m > 0
                        else "<sigma^2> n/a without --delta-a-m") + ("  [flagged]" if fit.extra.get("mse_flag") else ""))
        if not figs:
            from . import plotting
            figs.append(lambda c=c, fit=fit: plotting.ringdown(t, table[c], fit,
                                                               out / "ringdown.png"))
    return _finish(args, out, "ringdown_fit", payload, "\n".join(lines) + "\n", figs)


def _ringup_file(args, out):
    var = import_trace(args.input)
    if not isinstance(var, TimeTrace):
        raise ParseError("expected a time trace", args.input)
    cal, cfit = detection.calibrate_ringup(var, args.t_switch_s, args.t0, stiffness=args.stiffness)
    energy = detection.variance_to_energy(var.values, cal)
    trace = var.with_values(energy, unit="kT0", name="E")
    fit = analysis.ringup_fit(trace, cfit.value("T_fb"), args.t0, start=args.t_switch_s)
    text = "\n".join(["calibration:"] + _fit_lines(cfit) + ["ring-up:"] + _fit_lines(fit)
                     + [f"  gamma/2pi = {fit.value('gamma') / TWO_PI:.4g} Hz"]) + "\n"
    from . import plotting
    figs = [lambda: plotting.energy_growth(trace, out / "ringup.png")]
    write_series(trace, out / f"energy.{args.format or 'csv'}", args.format or "csv")
    return _finish(args, out, "ringup_fit", {"calibration": cfit.to_dict(), "fit": fit.to_dict()},
                   text, figs)


def _heating_file(args, out):
    trace = import_trace(args.input)
    if not isinstance(trace, TimeTrace):
        raise ParseError("expected a time trace", args.input)
    fit = analysis.heating_fit(trace, args.t_fb, TWO_PI * args.f_z_hz, args.t0,
                               start=args.t_switch_s)
    from . import plotting
    figs = [lambda: plotting.energy_growth(trace, out / "heating.png")]
    return _finish(args, out, "heating_fit", fit.to_dict(),
                   "\n".join(["heating:"] + _fit_lines(fit)) + "\n", figs)


def _allan_file(args, out):
    table = read_table(args.input)
    if "t_s" not in table or "f_Hz" not in table:
        raise ParseError("frequency table needs t_s and f_Hz columns", args.input)
    f = table["f_Hz"]
    valid = table.get("valid_1")
    series = spectral.FrequencySeries(table["t_s"], f, args.f_z_hz or float(np.nanmean(f)),
                                      None if valid is None else valid.astype(bool))
    taus = args.taus_s or _auto_taus(series)
    res = spectral.allan_deviation(series, taus)
    drift = spectral.drift_fit(series)
    fmt = args.format or "csv"
    write_series(res, out / f"allan.{fmt}", fmt)
    tau, sig = res.minimum()
    text = (f"minimum Allan deviation {sig:.4g} at tau = {tau:.4g} s\n"
            f"drift {drift.value:.4g} +/- {drift.sigma:.2g} Hz/s\n")
    from . import plotting
    figs = [lambda: plotting.allan(res, out / "allan.png")]
    payload = {"tau_min_s": tau, "sigma_min": sig, "drift_Hz_per_s": drift.value,
               "drift_sigma_Hz_per_s": drift.sigma}
    return _finish(args, out, "allan", payload, text, figs)


def _auto_taus(series):
    span = series.times[-1] - series.times[0]
    return np.geomspace(series.dt, span / 4, 25)


def _pll_file(args, out):
    trace = import_trace(args.input)
    if not isinstance(trace, TimeTrace):
        raise ParseError("expected a time trace", args.input)
    series = spectral.pll_extract(trace, args.f_z_hz, args.cutoff_hz)
    drift = spectral.drift_fit(series)
    fmt = args.format or "csv"
    write_series(series, out / f"frequency.{fmt}", fmt)
    from . import plotting
    figs = [lambda: plotting.frequency(series, out / "frequency.png", drift)]
    text = (f"{int(series.valid.sum())} locked samples, drift {drift.value:.4g} "
            f"+/- {drift.sigma:.2g} Hz/s\n")
    return _finish(args, out, "pll", {"drift_Hz_per_s": drift.value,
                                      "drift_sigma_Hz_per_s": drift.sigma}, text, figs)


def _profile_files(args, out):
    fits, lines, figs = [], [], []
    from . import plotting
    for i, path in enumerate(args.input):
        prof = import_trace(path)
        if not isinstance(prof, detection.IntensityProfile):
            raise ParseError("expected an intensity profile", path)
        fit = detection.fit_profile(prof)
        fits.append(fit)
        lines.append(f"{path}: a = {fit.amp_a:.4g} px ({fit.amplitude_m:.4g} m), "
                     f"w = {fit.w:.3g} px, d_model = {fit.d_model:.4g}, d_pf = {fit.d_pf}")
        figs.append(lambda prof=prof, fit=fit, i=i: plotting.profile(
            prof, fit, out / f"profile_{i:02d}.png"))
    payload = {"fits": [dict(fit.values, sigmas=fit.sigmas, d_model=fit.d_model, d_pf=fit.d_pf)
                        for fit in fits]}
    usable = [f for f in fits if f.d_pf is not None]
    if usable:
        da = detection.amplitude_uncertainty(usable)
        payload["delta_a_m"] = da
        lines.append(f"amplitude uncertainty {da:.4g} m")
    return _finish(args, out, "profile_fit", payload, "\n".join(lines) + "\n", figs)


_FILE_FITS = {"ringdown-fit": _ringdown_file, "ringup-fit": _ringup_file,
              "heating-fit": _heating_file, "allan": _allan_file, "pll": _pll_file,
              "profile-fit": _profile_files}


# --- closed-form subcommands ------------------------------------------------------

_REFERENCE_POINTS = (("gamma_P1", "P1"), ("gamma_P2", "P2"), ("gamma_P3", "P3"),
                     ("gamma_P4", "P4"))


def _tls(args, out):
    if args.input:
        table = read_table(args.input)
        need = ("gamma_Hz", "gammasigma_Hz", "pressure_mbar", "pressuresigma_mbar")
        missing = [k for k in need if k not in table]
        if missing:
            raise ParseError(f"missing columns {missing}", args.input)
        g, gs = TWO_PI * table["gamma_Hz"], TWO_PI * table["gammasigma_Hz"]
        p, ps = table["pressure_mbar"], table["pressuresigma_mbar"]
    else:
        from .references import REFERENCE_VALUES as R
        g = [R[k].value for k, _ in _REFERENCE_POINTS]
        gs = [R[k].sigma for k, _ in _REFERENCE_POINTS]
        p = [R[k].value for _, k in _REFERENCE_POINTS]
        ps = [args.pressure_rel_sigma * x for x in p]
    fit = analysis.tls_pressure_fit(g, gs, p, ps)
    text = (f"a = {fit.value('a'):.4g} +/- {fit.sigma('a'):.2g} Hz/mbar "
            f"(gamma/2pi = a P, {len(p)} points)\n")
    return _finish(args, out, "tls_fit", fit.to_dict(), text)


def _noise_budget(args, out):
    particle = physics.ParticleSpec(args.mass_kg, 150e-9, args.charge_e)
    env = physics.Environment(secular_frequency=args.f_z_hz, electrode_distance=args.distance_m)
    b = physics.noise_budget(args.rate_per_s, particle, env)
    payload = {"phonon_rate_per_s": b.phonon_rate, "S_ff_N2_per_Hz": b.force_noise,
               "S_EE_V2_per_m2_Hz": b.efield_noise, "S_v_V_per_sqrtHz": b.voltage_noise,
               "S_zz_m2_per_Hz": b.displacement_noise}
    lines = [f"{k:<22} {v:.4g}" if v is not None else f"{k:<22} n/a (neutral particle)"
             for k, v in payload.items()]
    return _finish(args, out, "noise_budget", payload, "\n".join(lines) + "\n")


def _damping(args, out):
    particle = physics.ParticleSpec(args.mass_kg, args.radius_m, 0, args.shape,
                                    args.accommodation)
    env = physics.Environment(gas_temperature=args.t_gas)
    a = physics.gas_damping_coefficient(particle, env)
    payload = {"shape": args.shape, "a_th_Hz_per_mbar": a.value, "a_th_sigma": a.sigma}
    text = f"a_th = {a.value:.4g} Hz/mbar ({args.shape})\n"
    if args.pressure_mbar is not None:
        env_p = physics.Environment.from_mbar(args.pressure_mbar, gas_temperature=args.t_gas)
        rate = physics.gas_damping_rate(particle, env_p)
        payload["gamma_rad_per_s"] = rate
        text += f"gamma = {rate:.4g} 1/s (gamma/2pi = {rate / TWO_PI:.4g} Hz) " \
                f"at {args.pressure_mbar:g} mbar\n"
    return _finish(args, out, "damping_theory", payload, text)


def _reproduce(args, out):
    from .reproduction import render_rows, reproduce_paper, write_rows
    seed = 12345 if args.seed is None else args.seed
    rows = reproduce_paper(quick=args.quick, seed=seed, closed_form_only=args.closed_form_only)
    write_rows(rows, out, args.format or "csv", plots=not args.no_plots)
    print(render_rows(rows), end="")
    return EXIT_OK


def _import(args, out):
    from .dataio import load_mapping
    mapping = load_mapping(args.mapping) if args.mapping else None
    obj = import_trace(args.path, mapping=mapping)
    fmt = args.format or "csv"
    target = write_series(obj, out / f"{Path(args.path).stem}.{fmt}", fmt)
    if isinstance(obj, TimeTrace):
        desc = (f"time trace '{obj.name}' [{obj.unit}]: {len(obj)} samples, dt = {obj.dt:.6g} s, "
                f"t0 = {obj.t0:.6g} s")
    else:
        desc = f"intensity profile: {len(obj)} pixels, pitch {obj.pixel_pitch:.6g} m"
    print(f"{desc}\nwritten {target}")
    return EXIT_OK


def _export(args):
    from .dataio import export_trace
    obj = import_trace(args.path)
    out = Path(args.output)
    fmt = args.to or {".json": "json", ".bin": "bin", ".raw": "bin"}.get(out.suffix, "csv")
    export_trace(obj, out, fmt)
    print(f"written {out}")
    return EXIT_OK


def _list_scenarios():
    for name, path in bundled_scenarios().items():
        sc = load_scenario(path)
        print(f"{name:<22} {sc.kind:<11} {sc.description}")
    return EXIT_OK


def dispatch(args) -> int:
    cmd = args.command
    if cmd == "scenarios":
        return _list_scenarios()
    if cmd == "export":
        return _export(args)
    if cmd in ("simulate", "run"):
        name = args.scenario or args.config
        if not name:
            raise ConfigError(["no scenario given (positional name/path or --config)"])
        sc = load_scenario(resolve_scenario(name))
        if cmd == "simulate":
            sc.output["raw_traces"] = True  # a series-only run always keeps the traces
        result = run_scenario(sc, args.out_dir, seed=args.seed, fmt=args.format,
                              plots=False if args.no_plots else None, estimate=cmd == "run")
        print(render_report(result), end="")
        return EXIT_OK if result.ok else EXIT_FIT
    if cmd in _FILE_FITS:
        if getattr(args, "input", None):
            return _FILE_FITS[cmd](args, _out(args))
        return _scenario_fit(args)
    handlers = {"tls-fit": _tls, "noise-budget": _noise_budget, "damping-theory": _damping,
                "reproduce-paper": _reproduce, "import": _import}
    return handlers[cmd](args, _out(args))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (InvalidInputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
