import os

import pytest
import toml

from controllers.scenario_manager import (SCHEMA_VERSION, ScenarioError, ScenarioManager,
                                          dumps_scenario, loads_scenario, scenario_from_dict,
                                          write_atomic)


def test_shipped_scenarios_load(manager):
    assert {"default", "uncalibrated"} <= set(manager.list_scenarios())
    default = manager.load("default")
    assert default.calibration["status"] == "residual_above_threshold"
    assert default.calibration["residual"] > default.calibration["threshold"]
    assert default.inputs.t_f == 300.0
    assert default.spec.V_max == 125.0
    uncalibrated = manager.load("uncalibrated")
    assert uncalibrated.inputs.t_f == 150.0
    assert uncalibrated.spec.V_max == 120.0
    assert uncalibrated.model.theta == (0.15, 0.1)
    assert uncalibrated.plant.K_H == 0.04
    assert uncalibrated.calibration == {}


def test_dump_and_load_round_trip(uncalibrated):
    again = loads_scenario(dumps_scenario(uncalibrated))
    assert again == uncalibrated


def test_load_by_path(manager, tmp_path, uncalibrated):
    path = tmp_path / "copy.toml"
    path.write_text(dumps_scenario(uncalibrated), encoding="utf-8")
    assert manager.load(str(path)) == uncalibrated


def test_unknown_scenario_lists_available(manager):
    with pytest.raises(ScenarioError) as info:
        manager.load("does-not-exist")
    assert "uncalibrated" in str(info.value)
    assert info.value.field == "scenario"


def mutated(scenario, section, key, value):
    data = scenario.to_dict()
    if section is None:
        data[key] = value
    else:
        data[section][key] = value
    return data


@pytest.mark.parametrize("section, key, value, field", [
    ("plant", "mu_Y", 1.0, "plant.mu_Y"),
    (None, "extra", 1, "extra"),
    ("optimization", "V_max", 90.0, "optimization.V_max"),
    ("model", "theta", [5.0, 0.1], "model.theta"),
    ("inputs", "S0", 500.0, "inputs.S0"),
    ("sampling", "sample_step", 0.75, "sampling.sample_step"),
    ("plant", "K_X", "fast", "plant.K_X"),
    (None, "schema_version", SCHEMA_VERSION + 1, "schema_version"),
])
def test_validation_names_the_field(uncalibrated, section, key, value, field):
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(mutated(uncalibrated, section, key, value))
    assert info.value.field == field


def test_missing_section_rejected(uncalibrated):
    data = uncalibrated.to_dict()
    del data["sampling"]
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(data)
    assert info.value.field == "sampling"


def test_missing_key_rejected(uncalibrated):
    data = uncalibrated.to_dict()
    del data["plant"]["evap_rate"]
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(data)
    assert info.value.field == "plant.evap_rate"


def test_invalid_toml_rejected():
    with pytest.raises(ScenarioError):
        loads_scenario("name = ")


def test_with_horizon_and_plant(uncalibrated):
    changed = uncalibrated.with_horizon(t_f=120.0, V_max=110.0).with_plant(K_H=0.0)
    assert changed.inputs.t_f == 120.0
    assert changed.spec.V_max == 110.0
    assert changed.plant.K_H == 0.0
    assert uncalibrated.inputs.t_f == 150.0


def test_save_is_atomic_and_round_trips(tmp_path, uncalibrated):
    manager = ScenarioManager(scenario_dir=str(tmp_path))
    path = manager.save(uncalibrated)
    assert os.path.basename(path) == "uncalibrated.toml"
    assert manager.list_scenarios() == ["uncalibrated"]
    assert manager.load("uncalibrated") == uncalibrated
    assert not [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]


def test_write_atomic_replaces_content(tmp_path):
    path = tmp_path / "nested" / "out.txt"
    write_atomic(str(path), "first")
    write_atomic(str(path), "second")
    assert path.read_text(encoding="utf-8") == "second"


def test_run_dir_naming(tmp_path):
    manager = ScenarioManager(output_root=str(tmp_path))
    directory = manager.run_dir("default", "proposed", 7)
    assert os.path.isdir(directory)
    assert os.path.basename(directory) == "default_proposed_7"
    written = manager.write(directory, "a.json", "{}")
    assert open(written, encoding="utf-8").read() == "{}"


def test_calibration_table_survives_round_trip(manager):
    default = manager.load("default")
    data = toml.loads(dumps_scenario(default))
    assert data["calibration"]["status"] == "residual_above_threshold"
    assert data["calibration"]["achieved_F"] == pytest.approx(0.15361)


def test_run_dir_suffix_for_sweep_points(tmp_path):
    manager = ScenarioManager(output_root=str(tmp_path))
    point = manager.run_dir("default", "ma", 3, suffix="filter-gain-0.35")
    summary = manager.run_dir("default", "sweep", 3, suffix="filter-gain")
    assert os.path.basename(point) == "default_ma_3_filter-gain-0.35"
    assert os.path.basename(summary) == "default_sweep_3_filter-gain"
    assert os.path.basename(manager.run_dir("default", "ma", 3, suffix="")) == "default_ma_3"
