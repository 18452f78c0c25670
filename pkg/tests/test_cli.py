import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from gammaflow import cli
from gammaflow import experiments as ex

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
IDS = ["allen_cahn_kink", "allen_cahn_circle", "heat_minimality", "plap_dissipation", "homogenization_sweep",
       "gl_gamma_sweep", "validators"]


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_list_is_complete_and_stable(capsys):
    assert cli.main(["--list"]) == 0
    first = capsys.readouterr().out
    assert cli.main(["--list"]) == 0
    assert capsys.readouterr().out == first
    lines = first.strip().splitlines()
    assert [ln.split()[0] for ln in lines] == IDS
    assert all("[" in ln and "]" in ln for ln in lines)


def test_shipped_configs_parse():
    for exp_id in IDS:
        cfg = cli.parse_config(CONFIGS / f"{exp_id}.ini")
        assert cfg.experiment == exp_id
        assert set(ex.EXPERIMENTS[exp_id].defaults["tolerances"]) <= set(cfg.params)


def test_typed_overrides(tmp_path):
    p = write(tmp_path, "[experiment]\nid = allen_cahn_kink\nseed = 3\nworkers = 2\noutput_dir = out\n"
                        "[grid]\ncells = 512\nextent = -2, 2\n[sweep]\neps = 0.1\n[tolerances]\ntol_drift = 0.01\n")
    cfg = cli.parse_config(p)
    assert cfg.seed == 3 and cfg.workers == 2
    assert cfg.output_dir == (tmp_path / "out").resolve()
    assert cfg.params["cells"] == (512,)
    assert cfg.params["extent"] == ((-2.0, 2.0),)
    assert cfg.params["eps"] == (0.1,)
    assert cfg.params["tol_drift"] == 0.01
    assert cfg.params["tol_residual"] == 1e-6


@pytest.mark.parametrize("body, line, needle", [
    ("[experiment]\nid = gl_gamma_sweep\n[sweep]\neps = 0.1, 0.2\n", 4, "strictly decreasing"),
    ("[experiment]\nid = nope\n", 2, "unknown experiment"),
    ("[experiment]\nid = validators\n[grid]\n\ncolour = red\n", 5, "unknown key"),
    ("[experiment]\nid = gl_gamma_sweep\n[tolerances]\ntol_rel = -1\n", 4, "positive"),
    ("[experiment]\nid = validators\n[bogus]\nx = 1\n", 3, "unknown section"),
    ("[experiment]\nid = validators\nseed = many\n", 3, "invalid value"),
    ("[experiment]\nid = gl_gamma_sweep\n[grid]\nextent = 1, 0\n", 4, "lo < hi"),
    ("[experiment]\nid = validators\nworkers = 0\n", 3, "workers"),
    ("id = validators\n", 1, "outside"),
])
def test_config_errors_carry_line_numbers(tmp_path, body, line, needle):
    p = write(tmp_path, body)
    with pytest.raises(cli.ConfigError) as err:
        cli.parse_config(p)
    assert err.value.line == line
    assert needle in str(err.value)
    assert f"{p}:{line}" in str(err.value)


def test_config_error_exit_code(tmp_path, capsys):
    p = write(tmp_path, "[experiment]\nid = gl_gamma_sweep\n[sweep]\neps = 0.1, 0.2\n")
    assert cli.main([str(p)]) == cli.EXIT_CONFIG
    assert ":4:" in capsys.readouterr().err
    assert cli.main([str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    assert cli.main([]) == cli.EXIT_CONFIG


def test_validators_run_and_manifest(tmp_path):
    out = tmp_path / "out"
    buf = io.StringIO()
    code = cli.run(CONFIGS / "validators.ini", output_dir=out, stream=buf)
    assert code == cli.EXIT_OK
    assert buf.getvalue().startswith("experiment validators\n")
    assert "FAIL" not in buf.getvalue()
    names = sorted(p.name for p in out.iterdir())
    assert names == ["config_resolved.json", "manifest.sha256", "report.txt", "validators.csv"]
    listed = [ln.split("  ", 1)[1] for ln in (out / "manifest.sha256").read_text().splitlines()]
    assert listed == ["config_resolved.json", "report.txt", "validators.csv"]
    assert ex.verify_manifest(out) == []
    resolved = json.loads((out / "config_resolved.json").read_text())
    assert resolved["experiment"] == "validators" and resolved["params"]["samples"] == 10000
    (out / "validators.csv").write_text("tampered\n")
    assert ex.verify_manifest(out) == ["validators.csv"]
    (out / "report.txt").unlink()
    assert ex.verify_manifest(out) == ["report.txt", "validators.csv"]


def test_assertion_failure_exit_code(tmp_path):
    p = write(tmp_path, "[experiment]\nid = gl_gamma_sweep\n[grid]\ncells = 1024\n[tolerances]\ntol_rel = 1e-6\n")
    buf = io.StringIO()
    assert cli.run(p, output_dir=tmp_path / "o", stream=buf) == cli.EXIT_ASSERTION
    assert "FAIL surface_tension" in buf.getvalue()


def test_solver_failure_exit_code(tmp_path, monkeypatch, capsys):
    from gammaflow import flows as fw

    def broken(prob, *a, **kw):
        raise fw.FlowSolverError("Newton did not converge at level 3", level=3)

    monkeypatch.setattr(fw, "solve", broken)
    p = write(tmp_path, "[experiment]\nid = allen_cahn_kink\n[grid]\ncells = 64\nlevels = 2\n")
    assert cli.main([str(p), "--output-dir", str(tmp_path / "o")]) == cli.EXIT_SOLVER
    assert "level 3" in capsys.readouterr().out
    assert "level 3" in (tmp_path / "o" / "report.txt").read_text()


def test_seed_override_changes_bank_artifacts(tmp_path):
    cfg = write(tmp_path, "[experiment]\nid = allen_cahn_kink\n[grid]\ncells = 256\nlevels = 10\n"
                          "[params]\nresidual_cells = 256\nbank_count = 8\n[tolerances]\ntol_residual = 1\n"
                          "tol_drift = 1\n")
    a, b, c = (tmp_path / n for n in "abc")
    for out, seed in ((a, None), (b, None), (c, 9)):
        assert cli.run(cfg, output_dir=out, seed_override=seed, stream=io.StringIO()) == 0
    assert (a / "kink_el_residual.csv").read_bytes() == (b / "kink_el_residual.csv").read_bytes()
    assert (a / "kink_el_residual.csv").read_bytes() != (c / "kink_el_residual.csv").read_bytes()
    assert json.loads((c / "config_resolved.json").read_text())["seed"] == 9


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "gammaflow", "--list"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.split()[0] == IDS[0]
