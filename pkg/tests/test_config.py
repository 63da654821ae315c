import json

import pytest

from residualvit.config import ConfigError, RunConfig, apply_overrides, from_dict, load


def test_defaults_validate():
    cfg = from_dict({})
    assert cfg.encoder_config().K == 16
    assert cfg.interleave_config().N == 2
    assert cfg.train_config().epochs == 5


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="'train.learning_rate'"):
        from_dict({"train": {"learning_rate": 0.1}})
    with pytest.raises(ConfigError, match="'bogus'"):
        from_dict({"bogus": 1})


def test_type_errors_named():
    with pytest.raises(ConfigError, match="encoder.H"):
        from_dict({"encoder": {"H": "32"}})
    with pytest.raises(ConfigError, match="interleave.use_residual"):
        from_dict({"interleave": {"use_residual": 1}})
    with pytest.raises(ConfigError, match="reduction"):
        from_dict({"reduction": {"p": 1.5}})


def test_ints_accepted_for_floats():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_overrides_and_json_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), {"train.lr": 0.5, "reduction.target_resolution": [16, 16],
                                        "reduction.mode": "resolution"})
    assert cfg.reduction_config().target_resolution == (16, 16)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    assert load(path) == cfg
    with pytest.raises(ConfigError, match="train.nope"):
        apply_overrides(cfg, {"train.nope": 1})


def test_malformed_json(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="malformed"):
        load(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text(json.dumps([1]))
    with pytest.raises(ConfigError):
        load(tmp_path / "list.json")
