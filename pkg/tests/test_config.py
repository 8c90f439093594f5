import json

import pytest

from phaseseg import config
from phaseseg.config import ConfigError, RunConfig


def test_defaults_merge_and_seed_fallback():
    cfg = config.from_dict({"seed": 7, "encoder": {"epochs": 3}})
    assert cfg.encoder.epochs == 3 and cfg.encoder.seed == 7
    assert cfg.projector.seed == 7 and cfg.synth.seed == 7
    assert cfg.encoder.window == 30 and cfg.projector.latent_dim == 40


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config.from_dict({"epochs": 3})
    with pytest.raises(ConfigError, match="encoder: unknown keys"):
        config.from_dict({"encoder": {"layers": 3}})
    with pytest.raises(ConfigError, match="sot"):
        config.from_dict({"sot": {"alpha": 2.0}})
    with pytest.raises(ConfigError):
        config.from_dict({"eval_split": "val"})


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        config.load(bad)


def test_round_trip(tmp_path):
    cfg = config.from_dict({"seed": 3, "num_classes": 3, "sot": {"q": [0.2, 0.3, 0.5]},
                            "split": {"train": ["a"], "test": ["b"]}})
    path = tmp_path / "effective.json"
    config.save(cfg, path)
    again = config.load(path)
    assert again == cfg
    assert json.loads(path.read_text())["projector"]["num_classes"] == 3


def test_overrides():
    cfg = RunConfig().with_overrides(seed=11, output_dir="elsewhere")
    assert cfg.seed == 11 and cfg.encoder.seed == 11 and cfg.output_dir == "elsewhere"
    assert RunConfig().with_overrides() == RunConfig()


def test_class_names_follow_k():
    assert config.from_dict({}).class_names == ("steps", "drive", "throw", "recovery")
    assert config.from_dict({"num_classes": 3}).class_names == ("phase0", "phase1", "phase2")


def test_split_helper():
    ids = [f"v{i:02d}" for i in range(20)]
    s = config.make_split(ids, 0.8, seed=0)
    assert len(s["train"]) == 16 and len(s["test"]) == 4
    assert set(s["train"]) | set(s["test"]) == set(ids) and not set(s["train"]) & set(s["test"])
    assert s == config.make_split(list(reversed(ids)), 0.8, seed=0)
    assert s != config.make_split(ids, 0.8, seed=1)
    assert config.make_split(["only"], 0.8) == {"train": ["only"], "test": []}


def test_explicit_split_validated():
    cfg = config.from_dict({"split": {"train": ["a", "zz"], "test": ["b"]}})
    with pytest.raises(ConfigError, match="zz"):
        config.resolve_split(cfg, ["a", "b"])
    cfg = config.from_dict({"split": {"train": ["a"], "test": ["b"]}})
    assert config.resolve_split(cfg, ["a", "b", "c"]) == {"train": ["a"], "test": ["b"]}
