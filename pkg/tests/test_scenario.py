import json
import textwrap

import numpy as np
import pytest

from levitrap import cli
from levitrap.scenario import (ConfigError, ESTIMATORS, KINDS, bundled_scenarios, load_scenario,
                               parse_scenario, run_scenario)

TRAJ = """
name = "short_thermal"
kind = "trajectory"
seed = 7

[environment]
pressure_mbar = 1e-3

[simulation]
duration_s = 2.0
initial_temperature_K = 300.0
"""

PLL = """
name = "short_pll"
kind = "pll"
seed = 3

[simulation]
rate_hz_per_s = 1e-4
duration_s = 30.0
"""


def write(tmp_path, text, extra="", name="s.toml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text) + textwrap.dedent(extra))
    return p


def test_bundled_scenarios_parse():
    names = bundled_scenarios()
    assert {"ringdown_P2", "ringup_P1", "heating_P4", "allan_P4", "pll_drift",
            "profiles_P2"} <= set(names)
    for path in names.values():
        sc = load_scenario(path)
        assert sc.seed == 12345 and sc.kind in KINDS


def test_validation_enumerates_every_problem():
    raw = {"name": "bad", "kind": "ringdown", "seed": "x",
           "environment": {"pressure_mbar": -1.0, "colour": "red"},
           "simulation": {"cadence_s": 0.0, "duration_s": "long"},
           "estimators": [{"op": "residual_mse"}, {"op": "nope"}, {"op": "pll_extract"}]}
    with pytest.raises(ConfigError) as exc:
        parse_scenario(raw)
    text = "\n".join(exc.value.problems)
    for needle in ("seed", "pressure_mbar", "colour", "cadence_s", "duration_s",
                   "needs an earlier 'ringdown_fit'", "unknown estimator 'nope'",
                   "does not accept ringdown"):
        assert needle in text, needle
    assert len(exc.value.problems) >= 8


def test_unit_free_key_names_are_rejected():
    raw = {"name": "x", "kind": "trajectory", "seed": 1, "environment": {"pressure": 1e-3}}
    with pytest.raises(ConfigError, match="pressure"):
        parse_scenario(raw)


def test_feedback_temperature_must_be_below_bath():
    raw = {"name": "x", "kind": "ringup", "seed": 1, "simulation": {"t_fb_K": 400.0}}
    with pytest.raises(ConfigError, match="t_fb"):
        parse_scenario(raw)


def test_toml_syntax_error_is_config_error(tmp_path):
    p = write(tmp_path, "name = \n")
    with pytest.raises(ConfigError):
        load_scenario(p)


def test_empty_chain_writes_series_only(tmp_path):
    p = write(tmp_path, "estimators = []\n" + TRAJ, "[output]\nraw_traces = true\n")
    res = run_scenario(p, tmp_path / "out")
    assert res.records == [] and res.ok
    assert "position.csv" in res.files
    fits = json.loads((tmp_path / "out" / "fits.json").read_text())
    assert fits["steps"] == []


def test_default_chain_applies_when_omitted(tmp_path):
    sc = load_scenario(write(tmp_path, TRAJ))
    assert [op for op, _ in sc.estimators] == list(KINDS["trajectory"].default_estimators)


def test_same_config_gives_identical_bytes(tmp_path):
    p = write(tmp_path, TRAJ, "[output]\nraw_traces = true\n")
    a = run_scenario(p, tmp_path / "a")
    b = run_scenario(p, tmp_path / "b")
    assert a.digest == b.digest
    for name in list(a.files) + a.figures + ["report.txt"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    c = run_scenario(p, tmp_path / "c", seed=8)
    assert c.digest != a.digest


def test_failed_step_is_recorded_and_dependents_skipped(tmp_path):
    p = write(tmp_path, PLL, """
        [[estimators]]
        op = "pll_extract"
        cutoff_hz = 500.0

        [[estimators]]
        op = "drift_fit"
        """)
    res = run_scenario(p, tmp_path / "out", plots=False)
    assert not res.ok
    assert res.record("pll_extract").status == "failed"
    assert "cutoff" in res.record("pll_extract").error
    assert res.record("drift_fit").status == "skipped"
    report = (tmp_path / "out" / "report.txt").read_text()
    assert "failed" in report and "skipped" in report


def test_independent_step_survives_a_failure(tmp_path):
    p = write(tmp_path, TRAJ, """
        [[estimators]]
        op = "psd"
        segment_s = 100.0

        [[estimators]]
        op = "energy_series"
        bin_s = 0.1
        """)
    res = run_scenario(p, tmp_path / "out", plots=False)
    assert res.record("psd").status == "failed"
    assert res.record("energy_series").status == "ok"


def test_registry_kinds_cover_every_default():
    for kind, spec in KINDS.items():
        for op in spec.default_estimators:
            assert kind in ESTIMATORS[op].kinds


def test_ringdown_scenario_reports_gamma_and_mse(tmp_path):
    res = run_scenario("ringdown_P2", tmp_path, plots=False)
    rec = res.record("ringdown_fit")
    assert rec.status == "ok"
    assert rec.summary["ratio_to_truth"] == pytest.approx(1.0, abs=0.034)
    report = (tmp_path / "report.txt").read_text()
    assert "MSE" in report and "<sigma^2>" in report


def test_with_estimators_validates(tmp_path):
    sc = load_scenario(write(tmp_path, PLL))
    with pytest.raises(ConfigError):
        sc.with_estimators([{"op": "drift_fit"}])
    assert [op for op, _ in sc.with_estimators([{"op": "pll_extract"}]).estimators] == \
        ["pll_extract"]


# --- command line ------------------------------------------------------------------

def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "name='x'\nkind='ringdown'\nseed=1\n[simulation]\ncadence_s=-1\n",
                name="bad.toml")
    assert cli.main(["run", str(bad), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert cli.main(["import", str(tmp_path / "missing.csv"),
                     "--out-dir", str(tmp_path / "o")]) == cli.EXIT_IO
    junk = tmp_path / "junk.csv"
    junk.write_text("t_s,z_m\n0,1\n1,nan?\n")
    assert cli.main(["import", str(junk), "--out-dir", str(tmp_path / "o")]) == cli.EXIT_IO
    failing = write(tmp_path, PLL, "[[estimators]]\nop='pll_extract'\ncutoff_hz=500.0\n",
                    name="fail.toml")
    assert cli.main(["run", str(failing), "--out-dir", str(tmp_path / "f"),
                     "--no-plots"]) == cli.EXIT_FIT
    flat = tmp_path / "flat.csv"
    flat.write_text("position_m,intensity\n0,1\n1e-6,1\n2e-6,1\n3e-6,1\n")
    assert cli.main(["profile-fit", "--input", str(flat),
                     "--out-dir", str(tmp_path / "p")]) == cli.EXIT_FIT
    capsys.readouterr()


def test_cli_closed_form_commands(tmp_path, capsys):
    assert cli.main(["noise-budget", "--out-dir", str(tmp_path)]) == 0
    nb = json.loads((tmp_path / "noise_budget.json").read_text())
    assert nb["S_ff_N2_per_Hz"] == pytest.approx(4.52e-42, rel=1e-3)
    assert cli.main(["damping-theory", "--shape", "sphere", "--radius-m", "189e-9",
                     "--out-dir", str(tmp_path)]) == 0
    assert cli.main(["tls-fit", "--out-dir", str(tmp_path)]) == 0
    tls = json.loads((tmp_path / "tls_fit.json").read_text())
    assert tls["parameters"][0]["value"] == pytest.approx(900, abs=200)
    out = capsys.readouterr().out
    assert "a_th" in out and "Hz/mbar" in out


def test_cli_simulate_then_fit_file(tmp_path, capsys):
    assert cli.main(["simulate", "ringdown_P2", "--out-dir", str(tmp_path / "sim")]) == 0
    table = tmp_path / "sim" / "ringdown.csv"
    assert table.exists() and not (tmp_path / "sim" / "ringdown_fits.csv").exists()
    assert cli.main(["ringdown-fit", "--input", str(table), "--delta-a-m", "3.9e-6",
                     "--out-dir", str(tmp_path / "fit")]) == 0
    fits = json.loads((tmp_path / "fit" / "ringdown_fit.json").read_text())
    gammas = [f["parameters"][0]["value"] for k, f in fits.items() if k != "z2_true_m2"]
    assert np.median(gammas) / (2 * np.pi * 59e-6) == pytest.approx(1.0, abs=0.034)
    assert (tmp_path / "fit" / "ringdown.png").exists()
    capsys.readouterr()


def test_cli_import_export(tmp_path, capsys):
    src = tmp_path / "z.csv"
    src.write_text("t_s,z_m\n0,1e-6\n0.5,2e-6\n1,3e-6\n")
    assert cli.main(["import", str(src), "--format", "json", "--out-dir", str(tmp_path / "o")]) == 0
    data = json.loads((tmp_path / "o" / "z.json").read_text())
    assert data["column"] == "z_m" and data["values"] == [1e-6, 2e-6, 3e-6]
    assert cli.main(["export", str(tmp_path / "o" / "z.json"), str(tmp_path / "back.csv")]) == 0
    back = cli.import_trace(tmp_path / "back.csv")
    assert back.values.tolist() == [1e-6, 2e-6, 3e-6] and back.dt == 0.5
    capsys.readouterr()


def test_cli_format_json_for_series(tmp_path, capsys):
    p = write(tmp_path, TRAJ, "[output]\nraw_traces = true\n")
    assert cli.main(["run", str(p), "--format", "json", "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "position.json").exists()
    assert (tmp_path / "o" / "energy.json").exists()
    capsys.readouterr()
