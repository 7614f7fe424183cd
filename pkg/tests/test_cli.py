import json
import subprocess
import sys
from pathlib import Path

import pytest

from boussinesq_stab import pipeline
from boussinesq_stab.cli import compare_runs, main
from boussinesq_stab.config import ConfigError, dump_config, from_dict, load_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
FAST = "sim:\n  nonlinear: false\n  open_loop_t_end: 0.5\n"


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["run", str(CONFIGS / "fixture.yaml"), "--out", str(out)])
    return code, out


def _write(tmp_path, text, name="c.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_run_writes_reports(fixture_run):
    code, out = fixture_run
    assert code == 0
    for name in ("config.json", "spectral.json", "rank.json", "feedback.json", "decay.json",
                 "summary.json", "trace_open_loop.csv", "trace_closed_loop.csv",
                 "trace_nonlinear.csv"):
        assert (out / name).is_file(), name
    decay = json.loads((out / "decay.json").read_text())
    assert decay["closed_loop_linear_pass"]
    assert json.loads((out / "spectral.json").read_text())["N"] == 2


def test_nothing_to_stabilize(tmp_path, capsys):
    code = main(["run", str(CONFIGS / "stable.yaml"), "--out", str(tmp_path)])
    assert code == 0
    assert "nothing to stabilize" in capsys.readouterr().out
    assert json.loads((tmp_path / "summary.json").read_text())["status"] == "nothing_to_stabilize"


@pytest.mark.parametrize("text", ["grid: {nx: 4}\n", "physics: {nu: -1}\n", "bogus: {}\n",
                                  "sim: {q: 4, p: 1.5}\n", "synthesis: {mode: reduced_13}\n",
                                  "grid: [1, 2]\n"])
def test_config_errors_exit_2(tmp_path, text):
    assert main(["run", _write(tmp_path, text), "--out", str(tmp_path / "o")]) == 2


def test_missing_config_exit_2(tmp_path):
    assert main(["run", str(tmp_path / "nope.yaml")]) == 2


def test_stage_failure_exit_3(tmp_path):
    # threshold sitting on an eigenvalue trips the spectral gap guard
    cfg = _write(tmp_path, "spectral: {threshold: 14.11011482, gap_tol: 1.0e-3}\n")
    out = tmp_path / "o"
    assert main(["run", cfg, "--out", str(out)]) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert summary["stage"] == "spectral" and summary["exit_code"] == 3


def test_rank_failure_exit_4(tmp_path, monkeypatch):
    real = pipeline.synthesize_inputs

    def failing(*args, **kwargs):
        from dataclasses import replace

        cm, rep = real(*args, **kwargs)
        return cm, replace(rep, passed=False)

    monkeypatch.setattr(pipeline, "synthesize_inputs", failing)
    out = tmp_path / "o"
    assert main(["run", _write(tmp_path, FAST), "--out", str(out)]) == 4
    assert json.loads((out / "rank.json").read_text())["kalman"]["passed"] is False


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BSTAB_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["run", str(CONFIGS / "stable.yaml")]) == 0
    assert (tmp_path / "env" / "summary.json").is_file()


def test_sweep_and_compare(tmp_path, capsys):
    cfg = _write(tmp_path, FAST)
    root = tmp_path / "sweep"
    assert main(["sweep", cfg, "--vary", "gamma1=2,4", "--out", str(root)]) == 0
    summary = json.loads((root / "sweep.json").read_text())
    fits = [r["decay"]["closed_loop_linear"]["gamma_fit"] for r in summary["runs"]]
    assert fits[1] > fits[0]
    capsys.readouterr()
    assert main(["compare", str(root / "gamma1=2"), str(root / "gamma1=4")]) == 0
    diff = json.loads(capsys.readouterr().out)
    assert diff["closed_loop_linear"]["gamma_fit"] == pytest.approx(fits[1] - fits[0])
    # a trace CSV is also accepted on both sides
    d = compare_runs(root / "gamma1=2" / "trace_closed_loop.csv",
                     root / "gamma1=4" / "trace_closed_loop.csv")
    assert d["trace"]["gamma_fit"] > 0


def test_sweep_rejects_bad_spec(tmp_path):
    cfg = _write(tmp_path, FAST)
    assert main(["sweep", cfg, "--vary", "gamma1"]) == 2
    assert main(["sweep", cfg, "--vary", "nonsense=1"]) == 2
    assert main(["sweep", cfg, "--vary", "gamma1=-1"]) == 2


def test_compare_incompatible(tmp_path, fixture_run):
    other = tmp_path / "decay.json"
    other.write_text(json.dumps({"open_loop": {"gamma_fit": 1.0, "M_fit": 1.0, "r2": 1.0}}))
    assert main(["compare", str(fixture_run[1]), str(other)]) == 3


def test_config_round_trip_and_replace():
    cfg = load_config(CONFIGS / "fixture.yaml")
    import yaml

    assert from_dict(yaml.safe_load(dump_config(cfg))) == cfg
    assert cfg.replace_value("gamma1", "4").synthesis.gamma1 == 4.0
    assert cfg.replace_value("regions.side", "bottom").regions.side == "bottom"
    assert cfg.t_end() == pytest.approx(5.0) and cfg.dt() == pytest.approx(0.005)
    with pytest.raises(ConfigError):
        cfg.replace_value("mode", "full")  # ambiguous between sections


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "boussinesq_stab", "--help"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "sweep" in res.stdout


def test_identical_runs_compare_to_zero(fixture_run):
    diff = compare_runs(fixture_run[1], fixture_run[1])
    assert all(v == 0 for rep in diff.values() for v in rep.values())


def test_negative_threshold_config_runs(tmp_path):
    assert main(["run", str(CONFIGS / "enhance.yaml"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "decay.json").read_text())["closed_loop_linear_pass"]
