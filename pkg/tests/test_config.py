from pathlib import Path

import numpy as np
import pytest

from taskph import PlanarChain
from taskph.config import (
    build_experiment, build_model, build_params, build_scenario, build_task, load_config, load_scenario_config,
    parse_yaml,
)
from taskph.errors import AssignmentViolationError, ConfigError
from taskph.ph import AnalyticDerivatives, FiniteDifferences

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.yaml"):
        cfg = load_scenario_config(path)
        build_task(cfg, build_model(cfg))


def test_include_merges_and_overrides(tmp_path):
    write(tmp_path, "base.yaml", "model:\n  type: planar\n  lengths: [1.0, 1.0]\n  masses: [1.0, 2.0]\n")
    top = write(tmp_path, "top.yaml", "include: base.yaml\nmodel:\n  masses: [3.0, 4.0]\n")
    cfg = load_scenario_config(top)
    model = build_model(cfg)
    assert isinstance(model, PlanarChain)
    assert list(model.masses) == [3.0, 4.0]
    assert list(model.lengths) == [1.0, 1.0]


def test_scientific_notation_is_a_float():
    assert parse_yaml("dt: 5e-4")["dt"] == 5e-4
    assert isinstance(parse_yaml("dt: 1e3")["dt"], float)


def test_unknown_key_reports_line(tmp_path):
    path = write(tmp_path, "bad.yaml", "model:\n  type: planar\n  lengths: [1.0]\n  masses: [1.0]\n  lenghts: [2.0]\n")
    with pytest.raises(ConfigError) as err:
        load_scenario_config(path)
    assert err.value.line == 5
    assert "lenghts" in str(err.value) and "lengths" in str(err.value)
    assert str(path) in str(err.value)


def test_type_errors_report_field(tmp_path):
    path = write(tmp_path, "bad.yaml", "integrator:\n  dt: fast\n")
    with pytest.raises(ConfigError) as err:
        load_scenario_config(path)
    assert err.value.field == "integrator.dt" and err.value.line == 2


def test_yaml_syntax_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "bad.yaml", "model: [1, 2\n"))


def test_missing_file_names_path(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_config(tmp_path / "nope.yaml")
    assert "nope.yaml" in str(err.value)
    top = write(tmp_path, "top.yaml", "include: gone.yaml\n")
    with pytest.raises(ConfigError) as err:
        load_config(top)
    assert "gone.yaml" in str(err.value)


def test_circular_include(tmp_path):
    write(tmp_path, "a.yaml", "include: b.yaml\n")
    b = write(tmp_path, "b.yaml", "include: a.yaml\n")
    with pytest.raises(ConfigError, match="circular"):
        load_config(b)


def test_overrides():
    cfg = load_scenario_config(CONFIGS / "pendulum.yaml", ["integrator.dt=5e-4", "initial.q=[1.0]"])
    assert cfg["integrator"]["dt"] == 5e-4
    sc = build_scenario(cfg)
    assert sc.dt == 5e-4 and sc.q0.tolist() == [1.0]
    assert isinstance(sc.derivatives, AnalyticDerivatives)


@pytest.mark.parametrize("override", ["integrator.dtt=1", "integrator.dt=abc", "nodot", "controller.routing=fast"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_scenario_config(CONFIGS / "pendulum.yaml", [override])


def test_controller_section_and_mass_metric():
    cfg = load_scenario_config(CONFIGS / "impedance_planar3.yaml")
    model = build_model(cfg)
    params = build_params(cfg, model, build_task(cfg, model))
    np.testing.assert_allclose(params.W, 30.0 * model.mass_matrix(params.q_star))
    cfg = load_scenario_config(CONFIGS / "impedance_planar3.yaml", ["controller.W=[[1, 0, 0], [0, 1, 0], [0, 0, 1]]"])
    with pytest.raises(ConfigError, match="scalar W"):
        build_params(cfg, model, build_task(cfg, model))


def test_task_target_checked():
    cfg = load_scenario_config(CONFIGS / "planar3_pulse.yaml", ["controller.x_star=[1.5, 1.4]"])
    sc = build_scenario(cfg)
    from taskph.sim import Simulation
    with pytest.raises(AssignmentViolationError):
        Simulation(sc)


def test_open_loop_torques_only(tmp_path):
    with pytest.raises(ConfigError, match="open-loop"):
        build_scenario(load_scenario_config(CONFIGS / "planar3_pulse.yaml",
                                            ["torques=[{start: 0.0, duration: 0.1, tau: [1, 1, 1]}]"]))


def test_default_derivatives_are_finite_differences():
    cfg = load_scenario_config(CONFIGS / "planar3_verify.yaml")
    from taskph.config import build_derivatives
    assert isinstance(build_derivatives(cfg), FiniteDifferences)


def test_experiment_requires_shared_target():
    cfg = load_scenario_config(CONFIGS / "pulse_grid.yaml")
    exp = build_experiment(cfg)
    assert exp.stiffnesses == (7.0, 30.0) and exp.pulse_force() == (10.0, 0.0)
    bad = load_scenario_config(CONFIGS / "pulse_grid.yaml", ["experiment.q_stars=[[0.3, 1.1, -0.7], [0.3, 1.1, -0.6]]"])
    with pytest.raises(ConfigError, match="same task target"):
        build_experiment(bad)


def test_missing_sections():
    with pytest.raises(ConfigError, match="model"):
        build_model({})
    with pytest.raises(ConfigError, match="experiment"):
        build_experiment(load_scenario_config(CONFIGS / "pendulum.yaml"))
