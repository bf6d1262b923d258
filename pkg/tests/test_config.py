import math

import pytest

from wfl_pma import config as Cf
from wfl_pma import sysmodel as S


def test_empty_file_gives_defaults():
    assert Cf.parse_config("") == Cf.ExperimentConfig()


def test_defaults_match_reference_settings():
    cfg = Cf.ExperimentConfig()
    sysc = cfg.system.build(1e6, 100, cfg.learning.tau)
    assert sysc.bandwidth == 10e6
    assert sysc.noise_psd == pytest.approx(S.dbm_to_watts(-174.0), rel=1e-15)
    assert sysc.path_loss_const == pytest.approx(1e-3, rel=1e-12)
    assert sysc.path_loss_exp == 2.0
    assert sysc.t_max == 2.0
    d, lr = cfg.devices, cfg.learning
    assert (d.f_max, d.p_max, d.kappa, d.energy_budget) == (1e9, 1.0, 5e-27, 0.1)
    assert (lr.tau, lr.eta_u, lr.eta_v, lr.momentum, lr.bits_per_param) == (5, 0.05, 0.05, 0.9, 16)


def test_full_document_parses():
    text = """
system:
  bandwidth_hz: 1e6
  t_max: 1.5
devices:
  count: 5
  energy_budget: 0.5
learning:
  hidden: [16]
  split_depth: 1
scheduler:
  policy: random-expansion
  V: 0.1
data:
  synthetic:
    dim: 12
    latent: 4
run:
  seeds: [3, 4]
  rounds: 7
bounds:
  L_u: 2.0
  rho: 0.25
"""
    cfg = Cf.parse_config(text)
    assert cfg.system.bandwidth_hz == 1e6
    assert cfg.learning.hidden == [16]
    assert cfg.data.synthetic.dim == 12
    assert cfg.run.seeds == [3, 4]
    assert cfg.bounds.L_u == 2.0 and cfg.bounds.initial_gap is None


@pytest.mark.parametrize("text, line, fragment", [
    ("system:\n  bandwidht_hz: 1\n", 2, "unknown key"),
    ("devices:\n  count: many\n", 2, "expected an integer"),
    ("devices:\n  count: 0\n", 2, "devices.count"),
    ("scheduler:\n  V: -1\n", 2, "scheduler.V"),
    ("scheduler:\n  policy: greedy\n", 2, "scheduler.policy"),
    ("learning:\n  hidden: [8]\n  split_depth: 5\n", 3, "split_depth"),
    ("run:\n  rounds: [1, 2]\n", 2, "expected a scalar"),
    ("run: {seeds: [1, 2\n", None, "invalid YAML"),
])
def test_errors_carry_locations(text, line, fragment):
    with pytest.raises(Cf.ConfigError) as err:
        Cf.parse_config(text, "exp.yaml")
    assert fragment in str(err.value)
    assert str(err.value).startswith("exp.yaml")
    if line is not None:
        assert err.value.line == line
        assert f"exp.yaml:{line}:" in str(err.value)


def test_class_coverage_checked():
    with pytest.raises(Cf.ConfigError, match="cover every class"):
        Cf.parse_config("devices:\n  count: 2\ndata:\n  shards_per_device: 2\n")
    # scheduling-only runs have no data to cover
    Cf.parse_config("devices:\n  count: 2\nlearning:\n  enabled: false\n")


def test_mnist_needs_paths():
    with pytest.raises(Cf.ConfigError, match="data.mnist.train_images"):
        Cf.parse_config("data:\n  source: mnist\n")


def test_replace_and_round_trip():
    cfg = Cf.ExperimentConfig().replace(**{"scheduler.V": 0.5, "data.synthetic.dim": 20,
                                           "run.seeds": (1, 2)})
    assert cfg.scheduler.V == 0.5 and cfg.data.synthetic.dim == 20 and cfg.run.seeds == [1, 2]
    assert Cf.parse_config(Cf.dump_config(cfg)) == cfg
    assert Cf.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(Cf.ConfigError, match="unknown key"):
        cfg.replace(**{"scheduler.W": 1})
    with pytest.raises(Cf.ConfigError):
        cfg.replace(**{"scheduler.V": -1.0})


def test_load_config_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("run:\n  rounds: 3\n")
    assert Cf.load_config(p).run.rounds == 3
    with pytest.raises(OSError):
        Cf.load_config(tmp_path / "missing.yaml")


def test_null_optional_and_numeric_strings():
    cfg = Cf.parse_config("system:\n  model_bits: null\n  bandwidth_hz: '2e6'\n")
    assert cfg.system.model_bits is None
    assert cfg.system.bandwidth_hz == 2e6
    assert math.isclose(Cf.parse_config("bounds:\n  L_u: 1\n").bounds.L_u, 1.0)
