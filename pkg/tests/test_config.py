import pytest
import yaml

from egoplan.config import ConfigError, RunConfig, config_from_dict, dump_config, load_config


def test_defaults_roundtrip(tmp_path):
    cfg = RunConfig()
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_every_default_is_written(tmp_path):
    dump_config(RunConfig(), tmp_path / "c.yaml")
    data = yaml.safe_load((tmp_path / "c.yaml").read_text())
    assert set(data) == {"vehicle", "field", "reachability", "search", "optimizer", "sim"}
    assert data["field"]["params"]["lambda_g"] == 0.01
    assert data["search"]["rho"] == 10.0


def test_overrides_apply():
    cfg = load_config(None, ["sim.trials=7", "search.levels=[-1, 0, 1]", "optimizer.weights.collision=80"])
    assert cfg.sim.trials == 7
    assert cfg.search.levels == (-1.0, 0.0, 1.0)
    assert cfg.optimizer.weights.collision == 80.0
    assert cfg.planner_config().weights.collision == 80.0


@pytest.mark.parametrize("data", [
    {"bogus": {}},
    {"sim": {"bogus": 1}},
    {"field": {"params": {"lambda_x": 1.0}}},
    {"sim": {"trials": "many"}},
    {"sim": {"trials": 0}},
    {"vehicle": {"v_max": -1.0}},
    {"optimizer": {"retime": "yes"}},
])
def test_invalid_entries_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        load_config(None, ["sim.trials"])


def test_sim_rate_must_match_command_rate():
    cfg = load_config(None, ["sim.rate=100"])
    with pytest.raises(ConfigError):
        cfg.sim_config()


def test_planner_config_wiring():
    cfg = load_config(None, ["vehicle.v_max=1.0", "reachability.command_rate=25", "sim.rate=25"])
    pc = cfg.planner_config()
    assert pc.search.v_max == 1.0
    assert pc.synced_optimizer().v_max == 1.0
    assert pc.command_dt == pytest.approx(0.04)
    assert cfg.sim_config().rate == 25
