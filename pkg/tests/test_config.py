import pytest

from einet.config import (Config, PROFILES, config_diff, dump_config, from_flat, load_config,
                          parse_pairs, resolve)
from einet.errors import ConfigError


def test_defaults():
    cfg = resolve()
    assert cfg.optim.lr == 2e-4
    assert cfg.sched.lr_decay == 0.999875
    assert cfg.model.dropout == 0.1
    assert (cfg.optim.beta1, cfg.optim.beta2, cfg.optim.weight_decay) == (0.8, 0.99, 0.01)
    assert cfg.run.profile == "desk"


def test_precedence_profile_file_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\ndata.batch_size = 4\nmodel.hidden = 48  # inline\n")
    cfg = load_config(path, ["model.hidden=96"], profile="tiny")
    assert cfg.data.hop_length == 64  # from profile
    assert cfg.data.batch_size == 4  # from file
    assert cfg.model.hidden == 96  # override beats file and profile
    assert cfg.run.profile == "tiny"


def test_profile_may_come_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("run.profile = tiny\n")
    assert load_config(path).data.hop_length == 64


@pytest.mark.parametrize("key", ["optim.learning_rate", "nosection", "bogus.lr"])
def test_unknown_key_is_named(key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        resolve(overrides={key: "1"})


def test_bad_values_rejected():
    with pytest.raises(ConfigError, match="optim.lr"):
        resolve(overrides={"optim.lr": "fast"})
    with pytest.raises(ConfigError):
        resolve(overrides={"optim.lr": "0"})
    with pytest.raises(ConfigError):
        resolve(overrides={"sched.lr_decay": "1.0"})
    with pytest.raises(ConfigError, match="upsample_rates"):
        resolve(overrides={"model.upsample_rates": "8,8,2"})
    with pytest.raises(ConfigError):
        resolve(profile="huge")
    with pytest.raises(ConfigError, match="expected"):
        parse_pairs("just text")


def test_dump_round_trips_through_file(tmp_path):
    cfg = resolve(profile="tiny", overrides={"loss.kl_weight": "0.5"})
    path = tmp_path / "dump.cfg"
    path.write_text(dump_config(cfg))
    again = load_config(path)
    assert again == cfg
    assert config_diff(cfg, again) == []


def test_flat_round_trip_and_diff():
    cfg = resolve(profile="tiny")
    assert from_flat(cfg.to_flat()) == cfg
    other = resolve(profile="tiny", overrides={"run.seed": "7"})
    assert config_diff(cfg, other) == ["run.seed: 1234 != 7"]


def test_every_profile_validates():
    for name in PROFILES:
        resolve(profile=name)
    assert isinstance(Config(), Config)
