"""Run configuration: one JSON file merging every section, plus flag overrides.

Schema (all sections and keys optional; missing keys take library defaults)::

    {
      "seed": 0,                    # master seed: overrides synth.seed and train.seed
      "n_base": null,               # subjects in the base pool (default 35%, 7 of 20)
      "synth":      {SynthConfig fields},
      "preprocess": {PreprocessConfig fields},
      "arch":       {ArchConfig fields},
      "train":      {TrainConfig fields, base training},
      "finetune":   {TrainConfig fields, defaults to "train"}
    }

``--set section.key=value`` overrides use JSON values (``--set train.lr=1e-3``,
``--set arch.se_layers=[]``); flags are applied after the file, so flags win.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from mirank.data.synth import SynthConfig
from mirank.model.network import ArchConfig
from mirank.preprocess import PreprocessConfig
from mirank.train import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "arch": ArchConfig,
    "train": TrainConfig,
    "finetune": TrainConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_base: int | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_base": self.n_base,
            "synth": self.synth.to_dict(),
            "preprocess": self.preprocess.to_dict(),
            "arch": self.arch.to_dict(),
            "train": self.train.to_dict(),
            "finetune": self.finetune.to_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_config.json"
        path.write_text(self.dumps())
        return path


def _section(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        obj = cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if hasattr(obj, "validate"):
        try:
            obj.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return obj


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    unknown = set(d) - {"seed", "n_base", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    train_vals = dict(d.get("train") or {})
    ft_vals = {**train_vals, **(d.get("finetune") or {})}
    sections = {name: dict(d.get(name) or {}) for name in _SECTIONS}
    sections["finetune"] = ft_vals
    pre = _section(PreprocessConfig, sections["preprocess"])
    sections["arch"].setdefault("n_samples", pre.epoch_samples)
    sections["arch"].setdefault("n_channels", len(sections["synth"].get("montage") or SynthConfig().montage))
    seed = d.get("seed")
    if seed is not None:
        for name in ("synth", "train", "finetune"):
            sections[name]["seed"] = int(seed)
    built = {name: _section(cls, sections[name]) for name, cls in _SECTIONS.items()}
    return RunConfig(seed=int(seed or 0), n_base=d.get("n_base"), **built)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path=None, overrides=(), seed: int | None = None) -> RunConfig:
    """Read ``path`` (optional), apply ``--set`` overrides, then ``seed``."""
    d: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-section")
        node[keys[-1]] = value
    if seed is not None:
        d["seed"] = seed
    return from_dict(d)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(
        cfg, seed=seed, synth=replace(cfg.synth, seed=seed),
        train=replace(cfg.train, seed=seed), finetune=replace(cfg.finetune, seed=seed),
    )
