import io
import json
import subprocess
import sys
from importlib import resources

import numpy as np
import pytest

from rklimit.cli import EXIT_IO, EXIT_NONCONVERGED, EXIT_OK, EXIT_VALIDATION, main
from rklimit.constants import CODATA2018, KEV, beta_K
from rklimit.spectrum import BackgroundModel, Binning, load_spectrum, save_background, save_spectrum, simulate_toy

F_S_GE_1300 = 2.267902416353636e-07


def run(*argv):
    buf = io.StringIO()
    code = main([str(a) for a in argv], out=buf)
    return code, buf.getvalue()


def read_csv(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return np.genfromtxt(lines, delimiter=",", names=True)


@pytest.fixture
def background_file(tmp_path, edges):
    path = tmp_path / "background.csv"
    save_background(BackgroundModel(Binning(edges), np.full(60, 10.0)), path)
    return path


@pytest.fixture
def spectrum_file(tmp_path, flat_background, signal_column):
    path = tmp_path / "spectrum.csv"
    save_spectrum(simulate_toy(flat_background, 0.0, signal_column, 21), path)
    return path


@pytest.fixture
def ge_only(tmp_path):
    cfg = json.loads(resources.files("rklimit").joinpath("data/materials_default.json").read_text())
    cfg["components"] = cfg["components"][:1]
    path = tmp_path / "ge.json"
    path.write_text(json.dumps(cfg))
    return path


def test_constants(capsys):
    code, out = run("constants")
    assert code == EXIT_OK
    rows = {line.split()[0]: float(line.split()[1]) for line in out.splitlines()}
    lam = next(v for k, v in rows.items() if k.startswith("collapse"))
    assert lam == pytest.approx(27.5e3, rel=5e-3)
    assert any(v == pytest.approx(beta_K(CODATA2018, KEV), rel=1e-13) for v in rows.values())
    assert run("constants")[1] == out


def test_signal_outputs_and_linearity(tmp_path):
    code, _ = run("signal", "--out-dir", tmp_path / "a")
    assert code == EXIT_OK
    code, _ = run("signal", "--out-dir", tmp_path / "b", "--y", 2)
    assert code == EXIT_OK
    a = read_csv(tmp_path / "a" / "signal_shape.csv")
    b = read_csv(tmp_path / "b" / "signal_shape.csv")
    assert len(a) == 301
    np.testing.assert_allclose(b["counts_per_keV"], 2 * a["counts_per_keV"], rtol=1e-15)
    bins = read_csv(tmp_path / "a" / "signal_bins.csv")
    assert len(bins) == 60
    whole = tmp_path / "whole"
    run("signal", "--out-dir", whole, "--bin-width", 300)
    total = read_csv(whole / "signal_bins.csv")["expected_signal"]
    assert bins["expected_signal"].sum() == pytest.approx(float(total), rel=1e-12)


def test_signal_ge_only_golden(tmp_path, ge_only):
    code, _ = run("signal", "--materials", ge_only, "--exposure-seconds", 5.357e6, "--y", 1 / 4.64**2,
                  "--out-dir", tmp_path)
    assert code == EXIT_OK
    table = read_csv(tmp_path / "signal_shape.csv")
    assert table["counts_per_keV"][0] == pytest.approx(F_S_GE_1300, rel=1e-12)


def test_simulate_deterministic(tmp_path, background_file):
    for d in ("a", "b"):
        assert run("simulate", "--background", background_file, "--n-toys", 3, "--seed", 4,
                   "--out-dir", tmp_path / d)[0] == EXIT_OK
    for k in range(3):
        a = (tmp_path / "a" / f"toy_{k:05d}.csv").read_bytes()
        assert a == (tmp_path / "b" / f"toy_{k:05d}.csv").read_bytes()
    toy = load_spectrum(tmp_path / "a" / "toy_00000.csv")
    assert toy.exposure_seconds == 62 * 86400
    assert toy.counts.shape == (60,)


def test_limit_end_to_end(tmp_path, spectrum_file, background_file):
    code, out = run("limit", "--spectrum", spectrum_file, "--background", background_file, "--samples", 50_000,
                    "--seed", 3, "--out-dir", tmp_path / "out", "--dump-chains")
    assert code == EXIT_OK
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert json.loads(out) == report
    assert np.isfinite(report["y_upper"]) and report["y_upper"] > 0
    assert report["rk_lower_m"] == 1 / np.sqrt(report["y_upper"])
    assert report["verdict"] == ("model_excluded" if report["rk_lower_m"] > 1.98 else "window_remains")
    assert report["y_upper"] == report["grid"]["y_upper"]
    assert report["mcmc"]["y_upper"] == pytest.approx(report["grid"]["y_upper"], rel=0.02)
    assert "mcmc_grid_discrepancy" not in report["flags"]
    assert report["prior"] == "uniform_in_Y" and report["config"]["seed"] == 3
    assert "output_dir" not in report["config"]
    assert len(report["inputs"]["spectrum"]["sha256"]) == 64
    post = read_csv(tmp_path / "out" / "posterior.csv")
    assert post["cumulative"][-1] == pytest.approx(1.0, abs=1e-9)
    chains = read_csv(tmp_path / "out" / "chains.csv")
    assert len(chains) == 4 * 50_000
    assert set(chains.dtype.names) == {"chain", "step", "Y", "log_post"}


def test_limit_byte_identical(tmp_path, spectrum_file, background_file):
    args = ["limit", "--spectrum", spectrum_file, "--background", background_file, "--samples", 20_000, "--seed", 9]
    run(*args, "--out-dir", tmp_path / "a")
    run(*args, "--out-dir", tmp_path / "b", "--workers", 4)
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_limit_config_file(tmp_path, spectrum_file, background_file):
    cfg = {"spectrum_path": spectrum_file.name, "background_path": background_file.name, "method": "grid",
           "prior": "uniform_in_RK", "level": 0.9}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    code, out = run("limit", "--config", tmp_path / "run.json", "--out-dir", tmp_path / "o")
    assert code == EXIT_OK
    report = json.loads(out)
    assert report["prior"] == "uniform_in_RK" and report["level"] == 0.9 and "mcmc" not in report
    code, out = run("limit", "--config", tmp_path / "run.json", "--level", 0.95, "--out-dir", tmp_path / "o")
    assert json.loads(out)["level"] == 0.95


def test_limit_method_disagreement_flag(tmp_path, spectrum_file, background_file):
    # a handful of samples cannot match the grid quantile to 2%
    code, out = run("limit", "--spectrum", spectrum_file, "--background", background_file, "--samples", 200,
                    "--burn-in", 0.0, "--chains", 2, "--out-dir", tmp_path)
    assert code == EXIT_OK
    report = json.loads(out)
    if abs(report["mcmc"]["y_upper"] / report["grid"]["y_upper"] - 1) > 0.02:
        assert "mcmc_grid_discrepancy" in report["flags"]


def test_strict_nonconvergence(tmp_path, spectrum_file, background_file):
    args = ["limit", "--spectrum", spectrum_file, "--background", background_file, "--method", "mcmc",
            "--chains", 1, "--samples", 500, "--out-dir", tmp_path]
    assert run(*args)[0] == EXIT_OK
    assert run(*args, "--strict")[0] == EXIT_NONCONVERGED
    assert "mcmc_not_converged" in json.loads((tmp_path / "report.json").read_text())["flags"]


def test_missing_background_is_io_error(tmp_path, spectrum_file, capsys):
    code, _ = run("limit", "--spectrum", spectrum_file, "--background", tmp_path / "nope.csv", "--out-dir", tmp_path)
    assert code == EXIT_IO
    assert "nope.csv" in capsys.readouterr().err


@pytest.mark.parametrize("mutate, pattern", [
    (lambda t: t.replace("1305.0,1310.0", "1305.0,1305.0", 1), "zero or negative width"),
    (lambda t: t.replace("10.0\n", "-1.0\n", 1), "negative"),
])
def test_bad_background_is_validation_error(tmp_path, spectrum_file, background_file, capsys, mutate, pattern):
    background_file.write_text(mutate(background_file.read_text()))
    code, _ = run("limit", "--spectrum", spectrum_file, "--background", background_file, "--out-dir", tmp_path)
    assert code == EXIT_VALIDATION
    assert pattern in capsys.readouterr().err


def test_binning_mismatch(tmp_path, spectrum_file):
    other = tmp_path / "bkg10.csv"
    save_background(BackgroundModel(Binning(np.linspace(1300, 1600, 31)), np.full(30, 20.0)), other)
    code, _ = run("limit", "--spectrum", spectrum_file, "--background", other, "--out-dir", tmp_path)
    assert code == EXIT_VALIDATION


def test_config_errors(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"sampels": 10}))
    assert run("limit", "--config", tmp_path / "bad.json")[0] == EXIT_VALIDATION
    assert "sampels" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert run("limit", "--config", tmp_path / "broken.json")[0] == EXIT_VALIDATION
    assert run("limit", "--config", tmp_path / "absent.json")[0] == EXIT_IO
    assert run("limit", "--level", 1.5)[0] == EXIT_VALIDATION
    assert run("signal", "--window", 1000, 1600)[0] == EXIT_VALIDATION
    assert run("signal", "--bin-width", 7)[0] == EXIT_VALIDATION


def test_coverage_command(tmp_path, background_file):
    code, out = run("coverage", "--background", background_file, "--n-toys", 100, "--n-sensitivity-toys", 20,
                    "--seed", 2, "--out-dir", tmp_path, "--workers", 2)
    assert code == EXIT_OK
    report = json.loads((tmp_path / "coverage.json").read_text())
    assert report["coverage"]["n_toys"] == 100
    assert report["median_sensitivity"] == report["coverage"]["y_true"] > 0
    code, out = run("coverage", "--background", background_file, "--n-toys", 100, "--y-true", 0, "--out-dir", tmp_path)
    assert json.loads(out)["coverage"]["fraction"] == 1.0
    assert run("coverage", "--background", background_file, "--n-toys", 0, "--y-true", 1)[0] == EXIT_VALIDATION


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "rklimit", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("rklimit ")
    bad = subprocess.run([sys.executable, "-m", "rklimit", "limit", "--method", "magic"], capture_output=True)
    assert bad.returncode == 2
