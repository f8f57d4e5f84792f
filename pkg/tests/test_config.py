import json

import pytest

from wdis.config import ConfigError, RunConfig, config_from_dict, parse_config


def test_seed_only_fills_defaults():
    cfg = config_from_dict({"seed": 7})
    assert cfg.seed == 7
    assert cfg.train.beta1 == 0.0 and cfg.train.beta2 == 0.9 and cfg.train.lr == 1e-4
    assert cfg.train.lam == 10.0 and cfg.train.critic_ratio == 5
    assert cfg.data.n_fg == 16 and cfg.data.n_bg == 8
    assert cfg.guide.strength == 0.9
    tc = cfg.train_config()
    assert tc.seed == 7 and tc.d_x == cfg.data.d_x


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="unknown key: lamda"):
        config_from_dict({"seed": 1, "lamda": 10})
    with pytest.raises(ConfigError, match="unknown key: train.lamda"):
        config_from_dict({"train": {"lamda": 10}})


def test_bad_beta_names_field():
    with pytest.raises(ConfigError, match="beta1"):
        config_from_dict({"train": {"beta1": 1.0}})


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({"seed": "7"}, "seed"),
        ({"seed": -1}, "seed"),
        ({"train": {"iterations": 1.5}}, "train.iterations"),
        ({"train": {"hidden": 3}}, "train.hidden"),
        ({"train": {"split": 24}}, "split"),
        ({"data": {"correlation": "sideways"}}, "correlation"),
        ({"data": {"n_train": 0}}, "n_train"),
        ({"guide": {"strength": 2}}, "strength"),
        ({"guide": {"backgrounds": [{"phrase": "on mars"}]}}, "background"),
        ({"probe": {"lr": 0}}, "probe.lr"),
        ({"train": True}, "train"),
    ],
)
def test_invalid_values(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(data)


def test_round_trip(tmp_path):
    cfg = config_from_dict(
        {
            "seed": 3,
            "train": {"hidden": [8, 8], "d_z": 6, "split": 4, "alpha": 0.5},
            "data": {"pairing": {"0": 1}, "missing_bg_fraction": 0.25},
            "guide": {"foregrounds": [{"label": "otter", "definition": "a mammal"}], "backgrounds": [{"phrase": "in snow"}]},
        }
    )
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    again = parse_config(path)
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_integer_accepted_for_float():
    cfg = config_from_dict({"train": {"lam": 5}})
    assert cfg.train.lam == 5.0 and isinstance(cfg.train.lam, float)


def test_invalid_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{seed: 1")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(path)


def test_default_instance_matches_empty_dict():
    assert config_from_dict({}) == RunConfig()
    assert json.loads(RunConfig().to_json())["train"]["critic_hidden"] == [64, 64]
