import pytest
import yaml

from levitwin.core.errors import ConfigError
from levitwin.core.presets import load_presets, scenario_names
from levitwin.core.scenario import load_scenario, parse_scenario


@pytest.mark.parametrize("name", scenario_names())
def test_shipped_scenarios_load(name):
    scenario = load_scenario(name)
    assert scenario.name == name


def test_missing_inductance_names_the_field(tmp_path):
    chain = dict(load_presets()["detection_chain"])
    del chain["l_tp_h"]
    path = tmp_path / "broken.yaml"
    path.write_text(yaml.safe_dump({"name": "broken", "modes": [{"preset": "mode3"}], "detection_chain": chain}))
    with pytest.raises(ConfigError) as excinfo:
        load_scenario(path)
    assert "l_tp" in excinfo.value.field


def test_feedback_must_target_a_declared_mode():
    data = {
        "name": "stray",
        "modes": [{"preset": "mode3"}],
        "feedback": [{"mode": "z", "target_f_hz": 50.59, "gain": 1.0, "demod_bandwidth_hz": 8.0}],
        "simulation": {"duration_s": 10.0},
    }
    with pytest.raises(ConfigError):
        parse_scenario(data)


def test_preset_values_can_be_overridden():
    scenario = parse_scenario({"name": "cold", "modes": [{"preset": "mode4", "t_env_k": 0.02, "label": "z"}]})
    mode = scenario.mode_by_label("z")
    assert mode.t_env == 0.02
    assert mode.f0 == 67.98
    with pytest.raises(ConfigError):
        scenario.mode_by_label("y")


def test_sim_config_scales_gains_and_applies_surrogate():
    scenario = load_scenario("mode34_sweep")
    config = scenario.sim_config(gain_factor=0.5, seed=9)
    assert config.seed == 9
    assert [fb.gain for fb in config.feedback] == [465.0, 750.0]
    assert all(m.q_factor == 300 for m in config.modes)
    assert [m.t_env for m in config.modes] == [1.972, 10.051]
    assert config.dt == pytest.approx(1 / (50 * 67.98))


def test_sim_config_needs_a_simulation_section():
    with pytest.raises(ConfigError):
        load_scenario("paper_current").sim_config()


def test_unknown_scenario_and_top_level_shape():
    with pytest.raises(ConfigError) as excinfo:
        load_scenario("no_such_scenario")
    assert excinfo.value.field == "config"
    with pytest.raises(ConfigError):
        parse_scenario(["not", "a", "mapping"])


def test_invalid_yaml_is_a_config_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("name: [unclosed\n")
    with pytest.raises(ConfigError):
        load_scenario(path)


def test_monitor_bandwidth_must_stay_below_half_the_lowest_mode():
    data = {
        "name": "wide_monitor",
        "modes": [{"preset": "mode3"}],
        "simulation": {"duration_s": 10.0},
        "spectral": {"measure_through_lockin": True, "monitor_bandwidth_hz": 30.0},
    }
    with pytest.raises(ConfigError) as excinfo:
        parse_scenario(data)
    assert excinfo.value.field == "spectral.monitor_bandwidth_hz"
    data["spectral"]["measure_through_lockin"] = False
    assert parse_scenario(data).spectral.monitor_bandwidth == 30.0


def fitted_scenario(**actuator_fit):
    return {
        "name": "fitted",
        "modes": [{"preset": "mode3"}],
        "feedback": [{"mode": "y", "target_f_hz": 50.59, "gain": 930, "demod_bandwidth_hz": 24.0,
                      "compensate_delay": True}],
        "actuator_fit": actuator_fit,
        "simulation": {"duration_s": 10.0, "surrogate_q_factor": 1e4},
    }


@pytest.mark.parametrize("fit, field", [({"y": "mode9"}, "actuator_fit"), ({"x": "mode3"}, "actuator_fit.x")])
def test_actuator_fit_references(fit, field):
    with pytest.raises(ConfigError) as excinfo:
        parse_scenario(fitted_scenario(**fit))
    assert excinfo.value.field == field


@pytest.mark.slow
def test_sim_config_fits_the_actuator_to_the_observed_point():
    scenario = parse_scenario(fitted_scenario(y="mode3"))
    fb = scenario.sim_config().feedback[0]
    assert fb.gain == 930
    assert fb.actuator_scale != 1.0
    halved = scenario.sim_config(gain_factor=0.5).feedback[0]
    assert halved.gain == 465
    assert halved.actuator_scale == fb.actuator_scale
