"""Config dataclasses, strict dict parsing, hashing, file roundtrip."""

import json

import pytest

from handkin.config import (
    RunConfig,
    config_from_dict,
    config_hash,
    config_to_dict,
    load_config,
    save_config,
)
from handkin.errors import ValidationError


def test_defaults_construct():
    cfg = RunConfig()
    assert cfg.schedule.train_steps == 1000
    assert cfg.schedule.sample_steps == 50
    assert cfg.train.momentum == 0.9
    assert cfg.data.n_poses > 0
    assert cfg.solver.restarts == 8


def test_roundtrip_dict():
    cfg = RunConfig()
    d = config_to_dict(cfg)
    assert config_from_dict(d) == cfg


def test_partial_dict_overrides():
    cfg = config_from_dict({"train": {"lr": 0.5}, "seed": 7})
    assert cfg.train.lr == 0.5
    assert cfg.seed == 7
    assert cfg.train.epochs == RunConfig().train.epochs


def test_unknown_top_level_key():
    with pytest.raises(ValidationError, match="lr_typo"):
        config_from_dict({"lr_typo": 1.0})


def test_unknown_nested_key_dotted_path():
    with pytest.raises(ValidationError, match=r"train\.lr_typo"):
        config_from_dict({"train": {"lr_typo": 1.0}})


def test_bool_rejected_for_numeric_field():
    with pytest.raises(ValidationError, match="epochs"):
        config_from_dict({"train": {"epochs": True}})


def test_wrong_type_rejected():
    with pytest.raises(ValidationError, match="lr"):
        config_from_dict({"train": {"lr": "fast"}})
    with pytest.raises(ValidationError, match="train"):
        config_from_dict({"train": 3})


def test_int_accepted_for_float_field():
    cfg = config_from_dict({"train": {"lr": 1}})
    assert cfg.train.lr == 1.0
    assert isinstance(cfg.train.lr, float)


def test_hash_stable_and_sensitive():
    a = config_hash(RunConfig())
    b = config_hash(RunConfig())
    assert a == b and len(a) == 64
    c = config_hash(config_from_dict({"train": {"lr": 0.123}}))
    assert c != a


def test_hash_ignores_dict_ordering():
    d1 = {"seed": 3, "train": {"lr": 0.01, "epochs": 2}}
    d2 = {"train": {"epochs": 2, "lr": 0.01}, "seed": 3}
    assert config_hash(config_from_dict(d1)) == config_hash(config_from_dict(d2))


def test_save_load_roundtrip(tmp_path):
    cfg = config_from_dict({"data": {"n_poses": 17}, "seed": 5})
    p = tmp_path / "config.json"
    save_config(str(p), cfg)
    doc = json.loads(p.read_text())
    assert doc["config_hash"] == config_hash(cfg)
    assert load_config(str(p)) == cfg


def test_load_bad_json(tmp_path):
    p = tmp_path / "config.json"
    p.write_text("{nope")
    with pytest.raises(ValidationError):
        load_config(str(p))
