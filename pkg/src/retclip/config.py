"""Run configuration: one JSON document with model/train/eval/data sections.

Every key has a default and unknown keys are rejected. The top-level ``seed``
is the single root of all randomness and overrides the per-section seeds.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import AugmentConfig, SyntheticCohortConfig
from .encoders import ImageEncoderConfig, TextEncoderConfig
from .errors import ConfigError
from .evaluate import AdaptConfig, SplitSpec
from .model import RetClipConfig
from .train import TrainConfig

_TUPLE_FIELDS = {"betas", "crop_scale_range", "norm_mean", "norm_std", "ratios", "condition_prior"}


def _build(cls, raw, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        nested = _NESTED.get((cls, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, f"{section}.{key}")
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(x) for x in obj]
    return obj


@dataclass(frozen=True)
class EvalSection:
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    n_seeds: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: RetClipConfig = field(default_factory=RetClipConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    data: SyntheticCohortConfig = field(default_factory=SyntheticCohortConfig)

    def resolved(self) -> "RunConfig":
        """Copy with every section seed replaced by the root seed."""
        ev = replace(self.eval, adapt=replace(self.eval.adapt, seed=self.seed),
                     split=replace(self.eval.split, seed=self.seed))
        return replace(self, train=replace(self.train, seed=self.seed),
                       data=replace(self.data, seed=self.seed), eval=ev)

    def to_dict(self) -> dict:
        return _plain(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        return _build(cls, raw, "config")

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


_NESTED = {
    (RunConfig, "model"): RetClipConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "eval"): EvalSection,
    (RunConfig, "data"): SyntheticCohortConfig,
    (RetClipConfig, "image"): ImageEncoderConfig,
    (RetClipConfig, "text"): TextEncoderConfig,
    (TrainConfig, "augment"): AugmentConfig,
    (EvalSection, "adapt"): AdaptConfig,
    (EvalSection, "split"): SplitSpec,
}
