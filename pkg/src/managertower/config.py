"""Run configuration: nested dataclasses, YAML files, dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .crossmodal import CrossModalConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthdata import PatternSpec
from .trainer import ObjectiveWeights, OptimConfig, TrainConfig


@dataclass
class DataConfig:
    patterns: int = 8
    noise_std: float = 0.1
    min_items: int = 1
    max_items: int = 3
    train_size: int = 4096
    heldout_size: int = 256
    neg_ratio: float = 0.5
    eval_batch_size: int = 64

    def validate(self, path: str = "data") -> None:
        for key in ("train_size", "heldout_size", "eval_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", f"{path}.{key}")
        if not 0.0 <= self.neg_ratio <= 1.0:
            raise ConfigError("neg_ratio must lie in [0, 1]", path + ".neg_ratio")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
        self.model.validate("model")
        self.data.validate("data")
        self.optim.validate("optim")
        self.trainer.validate("trainer")
        spec = self.pattern_spec()
        enc = self.model.encoder
        if enc.vocab < spec.vocab:
            raise ConfigError(f"vocab {enc.vocab} < {spec.vocab} tokens the data uses",
                              "model.encoder.vocab")
        if self.data.eval_batch_size > self.data.heldout_size:
            raise ConfigError("eval_batch_size exceeds heldout_size", "data.eval_batch_size")
        if self.trainer.batch_size > self.data.train_size:
            raise ConfigError("batch_size exceeds train_size", "trainer.batch_size")

    def pattern_spec(self) -> PatternSpec:
        enc, d = self.model.encoder, self.data
        try:
            return PatternSpec(patterns=d.patterns, grid=enc.grid, patch_dim=enc.patch_dim,
                               noise_std=d.noise_std, min_items=d.min_items,
                               max_items=d.max_items, max_len=enc.max_len, seed=self.seed)
        except ConfigError as exc:
            if exc.path in ("data.max_len",):
                raise ConfigError(str(exc).split(": ", 1)[-1], "model.encoder.max_len") from None
            raise


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"expected a mapping, got {type(value).__name__}", path)
        return from_dict(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if hint is float:
        if isinstance(value, str):
            try:
                return float(value)     # YAML 1.1 reads "2e-3" as a string
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return tuple(_coerce(v, float, f"{path}[{i}]") for i, v in enumerate(value))
    return value


def from_dict(cls, data: dict, path: str = ""):
    """Build ``cls`` from a mapping, filling defaults and rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path or "<root>")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in data:
        if key not in names:
            raise ConfigError("unknown key", f"{path}.{key}" if path else str(key))
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE", text)
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("empty override key", text)
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = copy.deepcopy(data)
    for text in overrides or []:
        keys, value = parse_override(text)
        node = data
        for i, k in enumerate(keys[:-1]):
            nxt = node.get(k)
            if nxt is None:
                nxt = node[k] = {}
            if not isinstance(nxt, dict):
                raise ConfigError("cannot descend into a scalar", ".".join(keys[:i + 1]))
            node = nxt
        node[keys[-1]] = value
    return data


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None,
                out_dir: str | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", str(path)) from None
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    if out_dir is not None:
        data["out_dir"] = out_dir
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=False)


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form, ignoring the output directory."""
    d = to_dict(cfg)
    d.pop("out_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


__all__ = ["CrossModalConfig", "DataConfig", "EncoderConfig", "ModelConfig", "ObjectiveWeights",
           "OptimConfig", "RunConfig", "TrainConfig", "apply_overrides", "config_digest",
           "dump_config", "from_dict", "load_config", "to_dict"]
