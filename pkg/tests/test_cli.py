import re
import subprocess
import sys

import pytest

from transformesh.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Small cohort + one quick training run shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(
        "# tiny end-to-end run\n"
        f"cohort_dir = {root / 'cohort'}\n"
        f"hierarchy_path = {root / 'hier.bin'}\n"
        f"results_dir = {root / 'results'}\n"
        "n_subjects = 12\n"
        "fraction_progressors = 0.5\n"
        "epochs = 1\n"
        "train_groups = normal\n"
    )
    assert main(["generate-cohort", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


def _error_fields(stderr: str) -> dict:
    line = stderr.strip().splitlines()[-1]
    m = re.fullmatch(r'error: kind=(\w+) file=(".*?") key=(\S+) msg=(".*")', line)
    assert m, line
    return {"kind": m[1], "file": m[2], "key": m[3], "msg": m[4]}


def test_generate_cohort_layout(workspace):
    root, _ = workspace
    assert (root / "cohort" / "cohort.manifest").exists()
    assert (root / "cohort" / "S0000" / "gt_month_072.ply").exists()
    assert (root / "cohort" / "S0000" / "month_000.ply").exists()


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "results" / "run"
    for name in ("model.config", "training.manifest", "loss.txt", "best.ckpt", "last.ckpt",
                 "train_log.csv", "losses.csv"):
        assert (run / name).exists(), name
    groups = (run / "training.manifest").read_text()
    assert "progressor" not in groups
    assert "exp(min(slot,4))" in (run / "loss.txt").read_text()
    assert (root / "hier.bin").exists()  # auto-built on first use


def test_evaluate_all_writes_table(workspace, capsys):
    root, cfg = workspace
    assert main(["evaluate", "--config", str(cfg), "--protocol", "all"]) == 0
    metrics = root / "results" / "metrics"
    for p in ("interpolation", "extrapolation", "trajectory"):
        assert (metrics / f"{p}.csv").read_text().startswith("subject_id,slot,month,mae,subject_error\n")
        assert (metrics / f"{p}_copy_reference.csv").exists()
    summary = (metrics / "summary.csv").read_text().splitlines()
    assert summary[0] == ("model,n_parameters,interpolation_median_x100,interpolation_mad_x100,"
                          "extrapolation_median_x100,extrapolation_mad_x100,trajectory_median_x100,trajectory_mad_x100")
    assert summary[1].startswith("ttm,") and summary[2].startswith("copy_reference,0,")
    assert (root / "results" / "config.echo").read_text().startswith("# command = evaluate\n")
    manifest = (root / "results" / "MANIFEST").read_text()
    assert "evaluate:" in manifest and "best.ckpt" in manifest
    assert "median x100" in capsys.readouterr().out


def test_evaluate_is_reproducible(workspace):
    root, cfg = workspace
    metrics = root / "results" / "metrics"
    assert main(["evaluate", "--config", str(cfg)]) == 0
    first = {p.name: p.read_bytes() for p in metrics.glob("*.csv")}
    assert main(["evaluate", "--config", str(cfg)]) == 0
    assert first == {p.name: p.read_bytes() for p in metrics.glob("*.csv")}


def test_anomaly_writes_heatmaps(workspace):
    root, cfg = workspace
    assert main(["anomaly", "--config", str(cfg)]) == 0
    heat = list((root / "results" / "heatmaps").glob("*.ply"))
    assert heat
    assert b"comment error_min" in heat[0].read_bytes()[:400]
    assert (root / "results" / "metrics" / "anomaly.csv").exists()


def test_anomaly_rejects_model_trained_on_progressors(workspace, capsys):
    root, cfg = workspace
    args = ["--config", str(cfg), "--run-id", "mixed", "--set", "train_groups=all"]
    assert main(["train"] + args) == 0
    assert main(["anomaly"] + args) == 1
    assert _error_fields(capsys.readouterr().err)["kind"] == "ManifestError"


def test_build_hierarchy_rebuild(workspace, capsys):
    root, cfg = workspace
    assert main(["build-hierarchy", "--config", str(cfg), "--rebuild-hierarchy"]) == 0
    assert "[642, 160, 40]" in capsys.readouterr().out


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--results-dir", str(tmp_path)]) == 0
    rows = (tmp_path / "metrics" / "gradcheck.csv").read_text().splitlines()
    assert rows[0] == "check,relative_error,tolerance,passed"
    assert all(r.endswith(",1") for r in rows[1:])


def test_unknown_key_reports_file_and_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 3\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(cfg)]) == 2
    err = _error_fields(capsys.readouterr().err)
    assert err == {"kind": "ConfigError", "file": f'"{cfg}"', "key": "learning_rate",
                   "msg": err["msg"]}


def test_bad_value_on_command_line(tmp_path, capsys):
    assert main(["train", "--results-dir", str(tmp_path), "--set", "epochs=many"]) == 2
    err = _error_fields(capsys.readouterr().err)
    assert err["key"] == "epochs" and err["file"] == '"<command line>"'


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert _error_fields(capsys.readouterr().err)["kind"] == "ConfigError"


def test_evaluate_without_cohort(tmp_path, capsys):
    code = main(["evaluate", "--results-dir", str(tmp_path), "--cohort-dir", str(tmp_path / "none")])
    assert code == 2
    assert _error_fields(capsys.readouterr().err)["key"] == "cohort_dir"


def test_console_script_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "transformesh.cli", "train", "--set", "bogus=1",
                           "--results-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error: kind=ConfigError")
