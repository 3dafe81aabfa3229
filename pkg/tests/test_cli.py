import json
import os

import pytest

from app import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, build_run_config, run_cli
from controllers.scenario_manager import dumps_scenario


@pytest.fixture
def fast_scenario_file(tmp_path, fast_scenario):
    path = tmp_path / "fast.toml"
    path.write_text(dumps_scenario(fast_scenario), encoding="utf-8")
    return str(path)


def test_validate_shipped_scenario(capsys):
    assert run_cli(["validate-scenario", "--scenario", "uncalibrated"]) == EXIT_OK
    assert "uncalibrated" in capsys.readouterr().out


def test_invalid_scenario_file_exits_one(tmp_path, fast_scenario, capsys):
    path = tmp_path / "tight.toml"
    path.write_text(dumps_scenario(fast_scenario.with_horizon(V_max=90.0)), encoding="utf-8")
    assert run_cli(["validate-scenario", "--scenario", str(path)]) == EXIT_USAGE
    assert "optimization.V_max" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    [],
    ["run", "--no-such-flag"],
    ["run", "--algorithm", "simplex"],
    ["run", "--scenario", "does-not-exist"],
    ["sweep", "--param", "n-starts", "--values", "1"],
    ["mc", "--replicates", "1", "--s0-star", "50"],
    ["calibrate", "--targets", "55,0.17"],
])
def test_usage_errors_exit_one(tmp_path, argv):
    if argv:
        argv = argv + ["--output-dir", str(tmp_path)]
    assert run_cli(argv) == EXIT_USAGE


def test_invalid_override_exits_one(tmp_path, fast_scenario_file):
    argv = ["run", "--scenario", fast_scenario_file, "--output-dir", str(tmp_path),
            "--filter-gain", "1.5", "--algorithm", "ma"]
    assert run_cli(argv) == EXIT_USAGE


def test_run_writes_artifacts(tmp_path, fast_scenario_file, capsys):
    argv = ["run", "--scenario", fast_scenario_file, "--output-dir", str(tmp_path),
            "--algorithm", "proposed", "--max-iters", "1", "--n-starts", "1", "--no-hessian",
            "--seed", "4"]
    assert run_cli(argv) == EXIT_OK
    out = tmp_path / "fast_proposed_4"
    names = set(os.listdir(out))
    assert {"result.json", "iterations.csv", "ledger.csv", "ledger.json", "prediction.csv",
            "summary.json"} <= names

    result = json.loads((out / "result.json").read_text(encoding="utf-8"))
    assert result["termination"] == "max_iterations"
    assert "timestamp" not in (out / "result.json").read_text(encoding="utf-8")
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["iterations"] == 1
    assert "timestamp" in summary
    assert "artifacts:" in capsys.readouterr().out


def test_oracle_command(tmp_path, fast_scenario_file, capsys):
    argv = ["oracle", "--scenario", fast_scenario_file, "--output-dir", str(tmp_path), "--grid", "5"]
    assert run_cli(argv) == EXIT_OK
    oracle = json.loads((tmp_path / "fast_oracle_0" / "oracle.json").read_text(encoding="utf-8"))
    assert oracle["g"] <= 0.0
    assert oracle["product_mass"] > 0.0
    assert "5 x 5 (25 points)" in capsys.readouterr().out


def test_run_config_overrides():
    args = build_parser().parse_args(["run", "--eps-trunc", "0.01", "--filter-gain", "0.3",
                                      "--max-iters", "7", "--noise", "0.05", "--central-differences"])
    cfg = build_run_config(args)
    assert cfg.correction.eps_trunc_max == 0.01
    assert cfg.filter_gain == 0.3
    assert cfg.termination.max_iterations == 7
    assert cfg.noise.sigma_rel == 0.05
    assert cfg.central_differences
    assert cfg.kkt_hessian

    defaults = build_run_config(build_parser().parse_args(["run"]), noise_default=0.02)
    assert defaults.noise.sigma_rel == 0.02


def test_sweep_directories_follow_run_naming(tmp_path, fast_scenario_file):
    argv = ["sweep", "--scenario", fast_scenario_file, "--output-dir", str(tmp_path),
            "--param", "filter-gain", "--values", "0.65,0.35", "--oracle-grid", "0",
            "--max-iters", "1", "--seed", "2", "--workers", "1"]
    assert run_cli(argv) in (EXIT_OK, EXIT_FAILURE)
    names = set(os.listdir(tmp_path))
    assert {"fast_ma_2_filter-gain-0.65", "fast_ma_2_filter-gain-0.35", "fast_sweep_2_filter-gain"} <= names
    assert (tmp_path / "fast_ma_2_filter-gain-0.65" / "result.json").exists()
    assert (tmp_path / "fast_sweep_2_filter-gain" / "sweep_summary.csv").exists()
