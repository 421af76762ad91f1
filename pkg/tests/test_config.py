import dataclasses

import pytest

from marollout.config import InflowSpec, ScenarioConfig, TrainingConfig, builtin, resolve


def test_builtin_scenarios():
    cong = builtin("congestion")
    assert cong.horizon == 700 and cong.inflow.rate == 2400 and cong.fixed_av_count == 6
    dyn = builtin("dynamic")
    assert dyn.horizon == 7200 and dyn.penetration == 0.10 and dyn.training.mode == "shared"
    assert builtin("dynamic_smoke").horizon == 1800
    with pytest.raises(KeyError):
        builtin("rush-hour")


def test_yaml_round_trip(tmp_path):
    scen = builtin("dynamic_smoke").replace(seed=17)
    scen.dump(tmp_path / "s.yaml")
    back = ScenarioConfig.load(tmp_path / "s.yaml")
    assert back == scen and back.digest() == scen.digest()
    assert resolve(str(tmp_path / "s.yaml")) == scen


def test_partial_yaml_uses_defaults(tmp_path):
    (tmp_path / "s.yaml").write_text("name: mine\ninflow:\n  rate: 1200\nppo:\n  hidden: [32, 32]\n")
    scen = ScenarioConfig.load(tmp_path / "s.yaml")
    assert scen.name == "mine" and scen.inflow.rate == 1200 and scen.ppo.hidden == (32, 32)
    assert scen.horizon == 700


def test_unknown_keys_rejected():
    with pytest.raises(ValueError, match="horizn"):
        ScenarioConfig.from_dict({"horizn": 10})
    with pytest.raises(ValueError, match="inflow"):
        ScenarioConfig.from_dict({"inflow": {"rat": 10}})


def test_random_inflow_schedule():
    spec = InflowSpec(kind="random")
    sched = spec.schedule(1800.0, 5)
    assert [t for t, _ in sched] == [300.0 * k for k in range(6)]
    assert all(0 <= r <= 4000 for _, r in sched)
    assert sched == spec.schedule(1800.0, 5) and sched != spec.schedule(1800.0, 6)
    with pytest.raises(ValueError):
        InflowSpec(kind="bursty")


def test_gamma_is_shared_with_ppo():
    scen = builtin("congestion")
    scen = scen.replace(env=dataclasses.replace(scen.env, gamma=0.8))
    assert scen.ppo_config().gamma == 0.8
    assert scen.dec_pomdp().horizon == scen.steps == 700


def test_training_validation():
    with pytest.raises(ValueError):
        TrainingConfig(mode="mixed")
    with pytest.raises(ValueError):
        TrainingConfig(eval_seeds=[])


def test_make_sim_overrides():
    scen = builtin("congestion")
    sim = scen.make_sim(3, penetration=0.2, rate=1000.0)
    assert sim.inflow.fixed_av_count is None and sim.inflow.penetration == 0.2
    assert sim.inflow.schedule == [(0.0, 1000.0)]
    assert scen.make_sim(3).inflow.fixed_av_count == 6
