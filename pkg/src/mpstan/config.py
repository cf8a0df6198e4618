"""Run configuration shared by every CLI subcommand.

A run config is one JSON document with fixed sections; unknown keys are
rejected at every level so typos fail before any work starts.  Command-line
flags are applied on top of the file (flags win).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .errors import ConfigurationError, InputError
from .geo_graph import GravityHyper
from .network import ModelDims
from .training import TrainConfig, ablation_config


@dataclass
class PathsConfig:
    cases: Optional[str] = None
    meta: Optional[str] = None
    distances: Optional[str] = None
    data: Optional[str] = None  # dataset snapshot written by ingest
    checkpoint: Optional[str] = None
    scenario: Optional[str] = None  # simulate input
    out: str = "runs"


@dataclass
class ModelConfig:
    d_gru: int = 64
    d_gat: int = 32
    heads: int = 2


@dataclass
class EvaluateConfig:
    split: str = "test"
    baseline: Optional[str] = None  # "sir" scores the per-window SIR fit instead
    series: list = field(default_factory=list)  # patch ids to export plot series for


@dataclass
class AblateConfig:
    variants: Optional[list] = None  # None = all six


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    gravity: GravityHyper = field(default_factory=GravityHyper)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    seed_given: bool = False  # whether a seed was set explicitly (file or flag)

    @property
    def dims(self) -> ModelDims:
        return ModelDims(d_gru=self.model.d_gru, d_gat=self.model.d_gat, heads=self.model.heads, t_out=self.train.t_out)

    @property
    def ablation(self) -> str:
        return self.train.ablation

    def to_dict(self) -> dict:
        d = {
            "paths": asdict(self.paths),
            "gravity": asdict(self.gravity),
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "evaluate": asdict(self.evaluate),
            "ablate": asdict(self.ablate),
        }
        d["ablation"] = d["train"].pop("ablation")
        return d

    def validate(self) -> "RunConfig":
        self.dims  # raises on bad dimensions
        if self.evaluate.split not in ("train", "val", "test"):
            raise ConfigurationError(f"evaluate.split must be train, val or test, got {self.evaluate.split!r}")
        if self.evaluate.baseline not in (None, "sir"):
            raise ConfigurationError(f"evaluate.baseline must be null or 'sir', got {self.evaluate.baseline!r}")
        if self.ablate.variants is not None:
            for v in self.ablate.variants:
                ablation_config(v)
        return self


_SECTIONS = {
    "paths": PathsConfig,
    "gravity": GravityHyper,
    "model": ModelConfig,
    "train": TrainConfig,
    "evaluate": EvaluateConfig,
    "ablate": AblateConfig,
}


def _build(cls, section: str, values: dict):
    if not isinstance(values, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    if cls is TrainConfig:
        allowed.discard("ablation")  # lives at the top level
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**values)
    except InputError as exc:
        raise ConfigurationError(f"invalid {section!r} section: {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"invalid {section!r} section: {exc}") from exc


def config_from_dict(doc: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Build a validated RunConfig.

    ``overrides`` maps ``"section.key"`` (or ``"ablation"``) to a value and is
    applied after the document; ``None`` values are ignored.
    """
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    doc = json.loads(json.dumps(doc))  # deep copy
    unknown = sorted(set(doc) - set(_SECTIONS) - {"ablation"})
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {', '.join(unknown)}")
    seed_given = "seed" in doc.get("train", {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "ablation":
            doc["ablation"] = value
            continue
        section, name = key.split(".", 1)
        doc.setdefault(section, {})[name] = value
        if key == "train.seed":
            seed_given = True
    train = dict(doc.get("train", {}))
    if "ablation" in train:
        raise ConfigurationError("'ablation' is a top-level key, not part of 'train'")
    parts = {name: _build(cls, name, doc.get(name, {})) for name, cls in _SECTIONS.items() if name != "train"}
    _build(TrainConfig, "train", train)  # key check
    try:
        parts["train"] = TrainConfig(**train, ablation=doc.get("ablation", "full"))
    except InputError as exc:
        raise ConfigurationError(f"invalid 'train' section: {exc}") from exc
    return RunConfig(**parts, seed_given=seed_given).validate()


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc, overrides)
