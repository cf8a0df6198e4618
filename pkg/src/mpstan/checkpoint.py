"""Versioned JSON checkpoint: everything needed to rebuild a trained model."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from .data_pipeline import Scaler
from .errors import InputError
from .geo_graph import GravityHyper, PatchGraph

if TYPE_CHECKING:
    from .network import ModelDims

FORMAT_TAG = "mpstan-checkpoint/1"


@dataclass(eq=False)
class Checkpoint:
    dims: ModelDims
    weights: dict  # name -> ndarray
    scaler: Scaler
    gravity: Optional[GravityHyper]
    ablation: str
    train_config: dict
    config_hash: str
    dataset_hash: str
    patch_ids: tuple
    population: np.ndarray
    adjacency: np.ndarray
    edge_weights: np.ndarray
    best_epoch: int = -1

    @property
    def mode(self):
        from .training import ablation_config

        return ablation_config(self.ablation)

    @property
    def t_in(self) -> int:
        return int(self.train_config["t_in"])

    @property
    def t_out(self) -> int:
        return self.dims.t_out

    @property
    def graph(self) -> PatchGraph:
        return PatchGraph(
            adjacency=self.adjacency, weights=self.edge_weights, patch_ids=tuple(self.patch_ids), gravity=self.gravity
        )

    def build_model(self):
        from .network import MPSTANModel, ModelWeights

        w = ModelWeights(self.dims)
        w.load_arrays(self.weights)
        return MPSTANModel(w, self.graph, self.population, self.scaler, self.mode)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "dims": asdict(self.dims),
            "weights": {k: np.asarray(v).tolist() for k, v in self.weights.items()},
            "scaler": self.scaler.to_dict(),
            "gravity": None if self.gravity is None else asdict(self.gravity),
            "ablation": {"variant": self.ablation, **asdict(self.mode)},
            "train_config": self.train_config,
            "config_hash": self.config_hash,
            "dataset_hash": self.dataset_hash,
            "patch_ids": list(self.patch_ids),
            "population": np.asarray(self.population).tolist(),
            "adjacency": np.asarray(self.adjacency).tolist(),
            "edge_weights": np.asarray(self.edge_weights).tolist(),
            "best_epoch": self.best_epoch,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        from .network import ModelDims

        if doc.get("format") != FORMAT_TAG:
            raise InputError(f"unsupported checkpoint format {doc.get('format')!r}; expected {FORMAT_TAG}")
        try:
            return cls(
                dims=ModelDims(**doc["dims"]),
                weights={k: np.array(v, dtype=float) for k, v in doc["weights"].items()},
                scaler=Scaler.from_dict(doc["scaler"]),
                gravity=None if doc["gravity"] is None else GravityHyper(**doc["gravity"]),
                ablation=doc["ablation"]["variant"],
                train_config=doc["train_config"],
                config_hash=doc["config_hash"],
                dataset_hash=doc["dataset_hash"],
                patch_ids=tuple(doc["patch_ids"]),
                population=np.array(doc["population"], dtype=float),
                adjacency=np.array(doc["adjacency"], dtype=float),
                edge_weights=np.array(doc["edge_weights"], dtype=float),
                best_epoch=int(doc.get("best_epoch", -1)),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed checkpoint: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_dict(doc)
