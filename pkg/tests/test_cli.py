import csv
import hashlib
import json
import subprocess
import sys

import pytest

from railchoice.cli import EXIT_CONVERGENCE, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from railchoice.latent_choice import read_afc
from railchoice.ptam import LeftBehindProfile


def digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def latent_run(small_dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("estimate")
    code = main(["estimate", "--data", str(small_dataset_dir), "--out", str(out), "--no-hessian"])
    return code, out, json.loads((out / "estimate.json").read_text())


def test_simulate_row_count(tmp_path, capsys):
    assert main(["simulate", "--passengers", "10", "--trips", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert len(read_afc(tmp_path / "afc.csv")) == 10
    assert "afc rows: 10" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "dataset.json").read_text())
    assert manifest["n_trips"] == 10 and manifest["seed"] == 0


def test_simulate_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "7", "simulate", "--passengers", "30", "--out", str(tmp_path / name)]) == EXIT_OK
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert main(["simulate", "--seed", "8", "--passengers", "30", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert digest(tmp_path / "a")["afc.csv"] != digest(tmp_path / "c")["afc.csv"]


def test_validation_errors_exit_2(tmp_path, capsys):
    assert main(["simulate", "--passengers", "0", "--out", str(tmp_path)]) == EXIT_VALIDATION
    bad = tmp_path / "bad.json"
    bad.write_text('{"simulaton": {}}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    bad.write_text("{not json")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    bad.write_text('{"optimizer": {"tol": 1}}')
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert main(["simulate", "--threads", "0", "--out", str(tmp_path)]) == EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_missing_files_exit_4(tmp_path):
    assert main(["estimate", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == EXIT_IO
    assert main(["simulate", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_IO


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "railchoice", "simulate", "--passengers", "0",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_VALIDATION and "error" in proc.stderr


def test_non_convergence_exit_3(small_dataset_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"optimizer": {"max_iter": 1}}))
    code = main(["estimate", "--data", str(small_dataset_dir), "--out", str(tmp_path), "--config", str(cfg),
                 "--model", "baseline", "--no-hessian"])
    assert code == EXIT_CONVERGENCE
    assert json.loads((tmp_path / "estimate.json").read_text())["converged"] is False


def test_calibrate_lb(small_dataset_dir, tmp_path, capsys):
    assert main(["calibrate-lb", "--data", str(small_dataset_dir), "--out", str(tmp_path)]) == EXIT_OK
    lb = LeftBehindProfile.from_csv(tmp_path / "leftbehind_calibrated.csv")
    vecs = set(lb.cells.values())
    assert len(vecs) == 1
    w = next(iter(vecs))
    assert len(w) == 3 and abs(w[1] - 0.5) < 0.06
    assert "C-F" in capsys.readouterr().out
    doc = json.loads((tmp_path / "calibration.json").read_text())
    assert doc["components"] == 2 and doc["cells"][0]["platform"] == ["C", "red", "up"]


def test_calibrate_lb_from_journey_file(small_dataset_dir, tmp_path):
    code = main(["calibrate-lb", "--data", str(small_dataset_dir), "--journeys",
                 str(small_dataset_dir / "journeys.csv"), "--components", "0", "--out", str(tmp_path)])
    assert code == EXIT_OK
    lb = LeftBehindProfile.from_csv(tmp_path / "leftbehind_calibrated.csv")
    assert set(lb.cells.values()) == {(1.0,)}


def test_estimate_writes_results(latent_run):
    code, out, doc = latent_run
    assert code == EXIT_OK and doc["converged"]
    names = [p["name"] for p in doc["parameters"]]
    assert names[0] == "theta[TS:x1]" and names[-1] == "sigma"
    assert all("rel_error" in p for p in doc["parameters"])
    lr = doc["likelihood_ratio"]
    assert lr["df"] == 5 and lr["loglik_baseline"] <= doc["loglik"]
    assert "LL_B" in (out / "estimate.txt").read_text()


def test_baseline_model_has_fewer_parameters(small_dataset_dir, tmp_path, latent_run):
    assert main(["estimate", "--data", str(small_dataset_dir), "--out", str(tmp_path), "--model", "baseline",
                 "--no-hessian"]) == EXIT_OK
    doc = json.loads((tmp_path / "estimate.json").read_text())
    assert len(doc["parameters"]) == 6
    assert doc["loglik"] <= latent_run[2]["loglik"]


def test_estimate_with_hessian_and_sweep(small_dataset_dir, tmp_path):
    code = main(["estimate", "--data", str(small_dataset_dir), "--out", str(tmp_path), "--model", "baseline",
                 "--init-seed-sweep", "3", "--seed", "1"])
    assert code == EXIT_OK
    doc = json.loads((tmp_path / "estimate.json").read_text())
    assert all(p["std_err"] is not None and p["std_err"] > 0 for p in doc["parameters"])
    assert doc["init_sweep"]["starts"] == 3 and doc["init_sweep"]["seed"] == 1
    with open(tmp_path / "init_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 6


def test_report_identity_scenario_matches_estimate(small_dataset_dir, tmp_path, latent_run):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"report": {"speed_factors": [1.0]}}))
    assert main(["report", "--data", str(small_dataset_dir), "--out", str(tmp_path), "--config", str(cfg)]) == EXIT_OK
    with open(tmp_path / "sensitivity_speed.csv") as fh:
        speed = list(csv.DictReader(fh))
    with open(tmp_path / "sensitivity_crowding.csv") as fh:
        crowd = list(csv.DictReader(fh))
    est = {p["name"]: p["estimate"] for p in latent_run[2]["parameters"]}
    assert len(speed) == len(est)
    for row in speed:
        assert float(row["gamma_mean"]) == 1.0
        assert float(row["estimate"]) == pytest.approx(est[row["parameter"]], rel=1e-9, abs=1e-12)
    assert {r["scenario"] for r in crowd} == {"actual", "less", "more"}
    actual = {r["parameter"]: float(r["estimate"]) for r in crowd if r["scenario"] == "actual"}
    assert actual == pytest.approx(est, rel=1e-9, abs=1e-12)
