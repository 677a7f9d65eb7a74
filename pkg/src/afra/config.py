"""Run configuration: one JSON document with data, model, train, rerank and eval sections."""

from __future__ import annotations

import dataclasses
import json
import typing
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .datamodel import ConfigError, SyntheticConfig
from .encoder import EncoderConfig, ModelConfig
from .embedder import EmbedderConfig
from .metrics import DEFAULT_KS
from .reranker import DEFAULT_HALF_LIFE, RERANK_MODES, ServingMode
from .trainer import TrainConfig


@dataclass
class RerankConfig:
    mode: str = "none"
    half_life: float = DEFAULT_HALF_LIFE

    def __post_init__(self):
        if self.mode not in RERANK_MODES:
            raise ConfigError(f"rerank.mode must be one of {RERANK_MODES}")
        if not self.half_life > 0:
            raise ConfigError("rerank.half_life must be positive")


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    mode: str = "rt"
    split_day: int | None = None   # default: the last day is the test day

    def __post_init__(self):
        ServingMode(self.mode)
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("eval.ks must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def split_day(self) -> int:
        return self.data.horizon_days - 1 if self.eval.split_day is None else self.eval.split_day

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        return _build(cls, doc, "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_json(doc)


def _build(cls, doc, where: str):
    """Dataclass from a dict, recursively, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, path)
        elif typing.get_origin(hint) is tuple and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def shipped_config(name: str) -> RunConfig:
    """A config bundled with the package (e.g. ``paper``)."""
    text = resources.files("afra").joinpath("configs", f"{name}.json").read_text(encoding="utf-8")
    return RunConfig.from_json(json.loads(text))


def derive_seed(seed: int, subsystem: str) -> int:
    """Independent 32-bit seed per subsystem from one run seed."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(subsystem.encode())])
    return int(ss.generate_state(1)[0])


__all__ = ["RunConfig", "RerankConfig", "EvalConfig", "EncoderConfig", "EmbedderConfig", "ModelConfig",
           "TrainConfig", "SyntheticConfig", "shipped_config", "derive_seed"]
