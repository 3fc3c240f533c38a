import pytest

from impedance_irl.config import (ExperimentConfig, config_hash, deep_update, load_env_dict, load_env_spec)


def test_builtin_tasks_load():
    for task in ("peg_in_hole", "cup_on_plate", "reach"):
        spec = load_env_spec(task)
        assert spec.task == task and spec.training_scenario in spec.scenarios


def test_env_overrides_deep_merge():
    spec = load_env_spec("peg_in_hole", {"contact": {"wall_stiffness": 5.0e4}, "horizon": 50})
    assert spec.contact.wall_stiffness == 5.0e4 and spec.horizon == 50
    assert spec.contact.hole_width == load_env_spec("peg_in_hole").contact.hole_width
    base = {"a": {"b": 1, "c": 2}}
    assert deep_update(base, {"a": {"b": 3}}) == {"a": {"b": 3, "c": 2}}
    assert base == {"a": {"b": 1, "c": 2}}


def test_bad_env_files(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("foo: 1\n")
    with pytest.raises(ValueError):
        load_env_dict(p)


def test_resolved_defaults():
    assert (ExperimentConfig(task="peg_in_hole").resolved().batch_size,
            ExperimentConfig(task="peg_in_hole").resolved().traj_len) == (8000, 200)
    cup = ExperimentConfig(task="cup_on_plate").resolved()
    assert (cup.batch_size, cup.traj_len) == (10000, 500)
    assert ExperimentConfig(observation="history5").resolved().hidden == 128
    assert ExperimentConfig().resolved().hidden == 32
    assert ExperimentConfig(batch_size=100).resolved().batch_size == 100
    assert ExperimentConfig().episodes == 60


@pytest.mark.parametrize("bad", [{"task": "nope"}, {"action_space": "torque"}, {"observation": "h3"},
                                 {"method": "gail"}, {"disc_loss": "x"}, {"generator_reward": "x"},
                                 {"reopt_init": "x"}, {"disc_optimizer": "rmsprop"}])
def test_invalid_configs(bad):
    with pytest.raises(ValueError):
        ExperimentConfig(**bad)


def test_round_trip_and_hash(tmp_path):
    cfg = ExperimentConfig(task="reach", seed=4, env_overrides={"horizon": 80}).resolved()
    p = tmp_path / "c.yaml"
    cfg.dump(p)
    back = ExperimentConfig.load(p)
    assert back == cfg and back.hash() == cfg.hash()
    assert ExperimentConfig(seed=5).hash() != ExperimentConfig(seed=4).hash()
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})
    assert back.env_spec().horizon == 80
