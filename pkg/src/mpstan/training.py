"""Hybrid-loss training with Adam and best-validation checkpoint selection."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data_pipeline import EpidemicDataset, chronological_split, fit_scaler, make_windows
from .errors import InputError, NumericError, TrainingError
from .geo_graph import PatchGraph
from .network import AblationMode, MPSTANModel, ModelDims, forward, init_weights

log = logging.getLogger(__name__)

ABLATIONS = {
    "full": AblationMode(True, True, True, True),
    "phy-all-off": AblationMode(False, False, True, True),
    "phy-loss-off": AblationMode(True, False, True, True),
    "phy-model-off": AblationMode(False, True, True, True),
    "mobility-off": AblationMode(True, True, False, True),
    "mpg-off": AblationMode(True, True, True, False),
}
# row order of the ablation comparison table
ABLATION_ORDER = ("phy-all-off", "phy-loss-off", "phy-model-off", "mobility-off", "mpg-off", "full")


def ablation_config(name: str) -> AblationMode:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise InputError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}") from None


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    t_in: int = 5
    t_out: int = 5
    split: tuple = (0.6, 0.2, 0.2)
    ablation: str = "full"
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.split = tuple(float(r) for r in self.split)
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InputError("learning_rate must be non-negative")
        if self.t_in < 1 or self.t_out < 1:
            raise InputError("t_in and t_out must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise InputError("grad_clip must be positive when set")
        ablation_config(self.ablation)

    @property
    def mode(self) -> AblationMode:
        return ablation_config(self.ablation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


def config_hash(*parts: dict) -> str:
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def hybrid_loss(y_st, y_phy, truth, mode: AblationMode = AblationMode()):
    """Mean absolute error of the neural forecast plus, when enabled, of the
    physical forecast, both against the same normalized truth."""
    truth = torch.as_tensor(truth)
    terms = [y_st] + ([y_phy] if mode.use_phy_in_loss else [])
    for t in terms:
        if torch.isnan(t).any():
            raise NumericError("NaN in forecast passed to the loss")
    if torch.isnan(truth).any():
        raise NumericError("NaN in ground truth passed to the loss")
    loss = (y_st - truth).abs().mean()
    if mode.use_phy_in_loss:
        loss = loss + (y_phy - truth).abs().mean()
    return loss


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"train_loss": self.train_loss, "val_mae": self.val_mae, "best_epoch": self.best_epoch}
        if include_timing:
            d["wall_time"] = self.wall_time
        return d


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: TrainHistory
    model: MPSTANModel


def validation_mae(model: MPSTANModel, windows) -> float:
    """MAE of the neural forecast in person counts, pooled over windows."""
    errs = []
    for s in windows:
        y_st, _ = model.predict(s)
        errs.append(np.abs(y_st - s.raw_target).ravel())
    return float(np.mean(np.concatenate(errs)))


def train(
    dataset: EpidemicDataset,
    graph: PatchGraph,
    config: TrainConfig,
    dims: Optional[ModelDims] = None,
    train_windows=None,
) -> TrainResult:
    """Fit MPSTAN on the training span, selecting the best validation epoch.

    ``train_windows`` restricts optimization to a subset of the training
    windows (indices or samples); used for capacity checks.
    """
    dims = dims or ModelDims(t_out=config.t_out)
    if dims.t_out != config.t_out:
        raise InputError(f"model t_out={dims.t_out} disagrees with config t_out={config.t_out}")
    if tuple(graph.patch_ids) != tuple(dataset.patch_ids):
        raise InputError("graph and dataset patch order differ")
    mode = config.mode
    span_train, span_val, _ = chronological_split(
        dataset.n_days, config.split, min_length=config.t_in + config.t_out
    )
    scaler = fit_scaler(dataset.features[:, span_train.start : span_train.stop])
    windows = make_windows(dataset, span_train, scaler, config.t_in, config.t_out)
    if train_windows is not None:
        windows = [windows[k] if isinstance(k, (int, np.integer)) else k for k in train_windows]
    val_windows = make_windows(dataset, span_val, scaler, config.t_in, config.t_out)

    weights = init_weights(dims, config.seed)
    model = MPSTANModel(weights, graph, dataset.population, scaler, mode)
    optimizer = torch.optim.Adam(
        weights.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        foreach=True,
    )
    rng = np.random.default_rng(config.seed)
    targets = [torch.as_tensor(s.target) for s in windows]

    history = TrainHistory()
    best_state, best_val = None, math.inf
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        losses = []
        for k in rng.permutation(len(windows)):
            optimizer.zero_grad(set_to_none=True)
            out = forward(windows[k], model.ctx, weights, mode)
            try:
                loss = hybrid_loss(out.y_st, out.y_phy, targets[k], mode)
            except NumericError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
            loss.backward()
            if config.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(weights.parameters(), config.grad_clip)
            optimizer.step()
            losses.append(loss.item())
        # fsum keeps the epoch mean independent of the shuffle order
        epoch_loss = math.fsum(losses) / len(losses)
        if not math.isfinite(epoch_loss):
            raise TrainingError(f"training diverged in epoch {epoch}: loss is {epoch_loss}", epoch=epoch)
        val = validation_mae(model, val_windows)
        history.train_loss.append(epoch_loss)
        history.val_mae.append(val)
        history.wall_time.append(time.perf_counter() - t0)
        if val < best_val or best_state is None:
            best_val, best_state = val, copy.deepcopy(weights.state_dict())
            history.best_epoch = epoch
        log.info("epoch %d  train %.6f  val MAE %.3f", epoch, epoch_loss, val)

    weights.load_state_dict(best_state)
    ckpt = Checkpoint(
        dims=dims,
        weights=weights.to_arrays(),
        scaler=scaler,
        gravity=graph.gravity,
        ablation=config.ablation,
        train_config=config.to_dict(),
        config_hash=config_hash(config.to_dict(), asdict(dims), _gravity_dict(graph)),
        dataset_hash=dataset.content_hash(),
        patch_ids=tuple(dataset.patch_ids),
        population=dataset.population,
        adjacency=np.array(graph.adjacency),
        edge_weights=np.array(graph.weights),
        best_epoch=history.best_epoch,
    )
    return TrainResult(checkpoint=ckpt, history=history, model=model)


def _gravity_dict(graph: PatchGraph):
    return None if graph.gravity is None else asdict(graph.gravity)
