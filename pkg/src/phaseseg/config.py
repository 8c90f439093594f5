"""Run configuration: one JSON document covering every pipeline stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .astgcn import EncoderConfig
from .pose_io import PHASE_NAMES
from .projector import ProjectorConfig
from .sot import SOTConfig
from .synth import SynthSpec


class ConfigError(ValueError):
    pass


_SECTIONS = {"synth": SynthSpec, "encoder": EncoderConfig, "projector": ProjectorConfig, "sot": SOTConfig}


@dataclass(frozen=True)
class RunConfig:
    dataset: str | None = None  # manifest path or directory; defaults to <output_dir>/dataset
    output_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1
    num_classes: int = 4
    class_names: tuple = PHASE_NAMES
    train_fraction: float = 0.8
    split: dict | None = None  # {"train": [...ids], "test": [...ids]}
    eval_split: str = "test"
    resume: bool = False
    synth: SynthSpec = field(default_factory=SynthSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    sot: SOTConfig = field(default_factory=SOTConfig)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.out / "dataset"

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _SECTIONS:
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d

    def with_overrides(self, seed=None, output_dir=None) -> RunConfig:
        d = self.to_dict()
        if output_dir is not None:
            d["output_dir"] = str(output_dir)
        if seed is not None:
            d["seed"] = int(seed)
            for name in _SECTIONS:
                if "seed" in d[name]:
                    d[name]["seed"] = int(seed)
        return from_dict(d)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    """Merge ``data`` over the defaults; stage seeds fall back to the global seed."""
    data = dict(data)
    unknown = sorted(set(data) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown keys {unknown}")
    seed = int(data.get("seed", 0))
    encoder_raw = dict(data.get("encoder") or {})
    for name, cls in _SECTIONS.items():
        section = dict(data.get(name) or {})
        if name == "projector":
            section.setdefault("num_classes", data.get("num_classes", 4))
            if "hidden_dim" in encoder_raw:
                section.setdefault("input_dim", encoder_raw["hidden_dim"])
        if "seed" in {f.name for f in fields(cls)}:
            section.setdefault("seed", seed)
        if name == "synth":
            section.setdefault("num_classes", data.get("num_classes", 4))
        data[name] = _build(cls, section, name)
    if "class_names" in data:
        data["class_names"] = tuple(data["class_names"])
    cfg = _build(RunConfig, data, "config")
    if cfg.eval_split not in ("train", "test", "all"):
        raise ConfigError(f"eval_split must be train, test or all, got {cfg.eval_split!r}")
    if len(cfg.class_names) < cfg.num_classes:
        names = tuple(cfg.class_names) + tuple(f"phase{k}" for k in range(len(cfg.class_names), cfg.num_classes))
        cfg = replace(cfg, class_names=names)
    if cfg.num_classes != 4 and tuple(cfg.class_names[:4]) == PHASE_NAMES and len(cfg.class_names) == 4:
        cfg = replace(cfg, class_names=tuple(f"phase{k}" for k in range(cfg.num_classes)))
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def make_split(video_ids, train_fraction: float = 0.8, seed: int = 0) -> dict:
    """Seeded random train/test partition of video ids (both lists sorted)."""
    ids = sorted(video_ids)
    rng = np.random.default_rng([seed, 0x5B11])
    perm = rng.permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    train = sorted(ids[i] for i in perm[:n_train])
    test = sorted(ids[i] for i in perm[n_train:])
    return {"train": train, "test": test}


def resolve_split(cfg: RunConfig, video_ids) -> dict:
    if cfg.split is not None:
        split = {"train": list(cfg.split.get("train", [])), "test": list(cfg.split.get("test", []))}
        missing = sorted((set(split["train"]) | set(split["test"])) - set(video_ids))
        if missing:
            raise ConfigError(f"split lists unknown video ids {missing}")
        return split
    return make_split(video_ids, cfg.train_fraction, cfg.seed)
