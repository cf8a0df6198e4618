"""Forecast metrics, evaluation reports and plot-series export."""
from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data_pipeline import (
    ACTIVE,
    RECOVERED,
    SUSCEPTIBLE,
    EpidemicDataset,
    chronological_split,
    fit_scaler,
    latest_window,
    make_windows,
)
from .epi_dynamics import CompartmentState, EpiParams, fit_sir_baseline, rollout
from .errors import ConfigurationError, InputError

MAPE_MIN_TRUTH = 1.0


@dataclass
class MetricSet:
    mae: float
    rmse: float
    mape: Optional[float]  # percent; None when every truth entry is < 1
    pcc: Optional[float]  # None when either array is constant
    ccc: Optional[float]
    n: int
    mape_excluded: int
    correlation_undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, truth) -> MetricSet:
    """MAE, RMSE, MAPE, PCC and CCC over all entries of two equal-shape arrays.

    Correlations pool every entry (population moments).  MAPE skips entries
    whose truth is below one person and reports how many were skipped.
    """
    x = np.asarray(pred, dtype=float).ravel()
    y = np.asarray(truth, dtype=float).ravel()
    if np.shape(pred) != np.shape(truth):
        raise InputError(f"prediction shape {np.shape(pred)} != truth shape {np.shape(truth)}")
    if x.size == 0:
        raise InputError("cannot score empty arrays")
    err = x - y
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = y >= MAPE_MIN_TRUTH
    mape = float(100.0 * np.mean(np.abs(err[keep] / y[keep]))) if keep.any() else None

    mx, my = x.mean(), y.mean()
    vx, vy = np.mean((x - mx) ** 2), np.mean((y - my) ** 2)
    cov = np.mean((x - mx) * (y - my))
    if vx > 0 and vy > 0:
        pcc = float(np.clip(cov / math.sqrt(vx * vy), -1.0, 1.0))
        ccc = float(2.0 * cov / (vx + vy + (mx - my) ** 2))
        undefined = False
    else:
        pcc = ccc = None
        undefined = True
    return MetricSet(
        mae=mae, rmse=rmse, mape=mape, pcc=pcc, ccc=ccc,
        n=int(x.size), mape_excluded=int((~keep).sum()), correlation_undefined=undefined,
    )


@dataclass
class ForecastReport:
    dataset: str
    dataset_hash: str
    split: str
    t_out: int
    ablation: str
    metrics: MetricSet
    per_patch: dict
    metrics_phy: Optional[MetricSet] = None
    # window x patch x horizon arrays in person counts
    pred_st: np.ndarray = field(default=None, repr=False)
    pred_phy: Optional[np.ndarray] = field(default=None, repr=False)
    truth: np.ndarray = field(default=None, repr=False)
    starts: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "dataset_hash": self.dataset_hash,
            "split": self.split,
            "t_out": self.t_out,
            "ablation": self.ablation,
            "metrics": self.metrics.to_dict(),
            "metrics_phy": None if self.metrics_phy is None else self.metrics_phy.to_dict(),
            "per_patch": {k: v.to_dict() for k, v in self.per_patch.items()},
            "n_windows": int(self.truth.shape[0]),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _split_windows(dataset: EpidemicDataset, ratios, split: str, t_in: int, t_out: int, scaler):
    spans = {s.name: s for s in chronological_split(dataset.n_days, ratios)}
    if split not in spans:
        raise InputError(f"split must be one of {sorted(spans)}, got {split!r}")
    span = spans[split]
    if len(span) < t_in + t_out:
        raise ConfigurationError(f"{split} span has {len(span)} days; need at least t_in + t_out = {t_in + t_out}")
    return make_windows(dataset, span, scaler, t_in, t_out)


def _check_compatible(ckpt: Checkpoint, dataset: EpidemicDataset):
    if tuple(ckpt.patch_ids) != tuple(dataset.patch_ids):
        raise InputError("checkpoint and dataset patch ids differ")


def evaluate(ckpt: Checkpoint, dataset: EpidemicDataset, split: str = "test", t_out: Optional[int] = None) -> ForecastReport:
    """Score the neural forecast on every window of a split, in person counts."""
    if t_out is not None and t_out != ckpt.t_out:
        raise ConfigurationError(f"checkpoint forecasts {ckpt.t_out} days, {t_out} requested")
    _check_compatible(ckpt, dataset)
    windows = _split_windows(dataset, ckpt.train_config["split"], split, ckpt.t_in, ckpt.t_out, ckpt.scaler)
    model = ckpt.build_model()
    st, phy = [], []
    for s in windows:
        y_st, y_phy = model.predict(s)
        st.append(y_st)
        phy.append(y_phy)
    pred_st = np.stack(st)
    pred_phy = None if phy[0] is None else np.stack(phy)
    truth = np.stack([s.raw_target for s in windows])
    per_patch = {pid: compute_metrics(pred_st[:, i], truth[:, i]) for i, pid in enumerate(dataset.patch_ids)}
    return ForecastReport(
        dataset=dataset.name,
        dataset_hash=dataset.content_hash(),
        split=split,
        t_out=ckpt.t_out,
        ablation=ckpt.ablation,
        metrics=compute_metrics(pred_st, truth),
        metrics_phy=None if pred_phy is None else compute_metrics(pred_phy, truth),
        per_patch=per_patch,
        pred_st=pred_st,
        pred_phy=pred_phy,
        truth=truth,
        starts=[s.start for s in windows],
    )


def evaluate_sir_baseline(
    dataset: EpidemicDataset, split: str = "test", t_in: int = 5, t_out: int = 5, ratios=(0.6, 0.2, 0.2)
) -> ForecastReport:
    """Per-window SIR baseline: fit (beta, gamma) per patch on the input days
    by grid least squares, then roll SIR forward from the last input day."""
    train_span = chronological_split(dataset.n_days, ratios)[0]
    scaler = fit_scaler(dataset.features[:, train_span.start : train_span.stop])
    windows = _split_windows(dataset, ratios, split, t_in, t_out, scaler)
    pop = dataset.population
    preds = []
    for s in windows:
        raw = s.raw_input
        fit = fit_sir_baseline(raw[:, :, SUSCEPTIBLE].T, raw[:, :, ACTIVE].T, raw[:, :, RECOVERED].T, pop)
        x0 = CompartmentState.from_channels(s.raw_last_day, pop)
        params = EpiParams.constant(dataset.n_patches)
        params = EpiParams(fit.beta, fit.gamma, params.d_s, params.d_i, params.d_r)
        preds.append(rollout(x0, None, params, t_out, use_mobility=False).infected.T)
    pred = np.stack(preds)
    truth = np.stack([s.raw_target for s in windows])
    per_patch = {pid: compute_metrics(pred[:, i], truth[:, i]) for i, pid in enumerate(dataset.patch_ids)}
    return ForecastReport(
        dataset=dataset.name,
        dataset_hash=dataset.content_hash(),
        split=split,
        t_out=t_out,
        ablation="sir-baseline",
        metrics=compute_metrics(pred, truth),
        per_patch=per_patch,
        pred_st=pred,
        truth=truth,
        starts=[s.start for s in windows],
    )


def emit_series(
    ckpt: Checkpoint,
    dataset: EpidemicDataset,
    patch_ids: Sequence[str],
    t_out: Optional[int],
    out_dir,
    split: str = "test",
    report: Optional[ForecastReport] = None,
) -> list[Path]:
    """Write ``<patch_id>.csv`` files with columns ``date,truth,pred_st,pred_phy``.

    Rows cover the whole split.  Forecasts come from back-to-back windows
    (every ``t_out``-th window), so each date after the first input block
    carries exactly one forecast; other cells are left empty.
    """
    index = {pid: i for i, pid in enumerate(dataset.patch_ids)}
    unknown = [p for p in patch_ids if p not in index]
    if unknown:
        raise InputError(f"unknown patch ids: {unknown}")
    report = report or evaluate(ckpt, dataset, split, t_out)
    span = {s.name: s for s in chronological_split(dataset.n_days, ckpt.train_config["split"])}[split]
    t_in, t_out = ckpt.t_in, ckpt.t_out
    by_day: dict = {}
    for w in range(0, len(report.starts), t_out):
        first_target = report.starts[w] + t_in
        for h in range(t_out):
            by_day[first_target + h] = (w, h)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for pid in patch_ids:
        i = index[pid]
        path = out_dir / f"{pid}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", "truth", "pred_st", "pred_phy"])
            for t in range(span.start, span.stop):
                row = [dataset.dates[t].isoformat(), repr(float(dataset.features[i, t, ACTIVE])), "", ""]
                if t in by_day:
                    w, h = by_day[t]
                    row[2] = repr(float(report.pred_st[w, i, h]))
                    if report.pred_phy is not None:
                        row[3] = repr(float(report.pred_phy[w, i, h]))
                writer.writerow(row)
        paths.append(path)
    return paths


@dataclass
class FutureForecast:
    patch_ids: tuple
    dates: tuple  # the t_out days after the dataset end
    pred_st: np.ndarray  # N x t_out
    pred_phy: Optional[np.ndarray]

    def write_csv(self, path) -> None:
        """Long format: one ``date,patch_id,pred_st,pred_phy`` row per patch and day."""
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", "patch_id", "pred_st", "pred_phy"])
            for i, pid in enumerate(self.patch_ids):
                for h, day in enumerate(self.dates):
                    phy = "" if self.pred_phy is None else repr(float(self.pred_phy[i, h]))
                    writer.writerow([day.isoformat(), pid, repr(float(self.pred_st[i, h])), phy])


def forecast_future(ckpt: Checkpoint, dataset: EpidemicDataset) -> FutureForecast:
    """Forecast the ``t_out`` days following the last observed day."""
    _check_compatible(ckpt, dataset)
    sample = latest_window(dataset, ckpt.scaler, ckpt.t_in)
    y_st, y_phy = ckpt.build_model().predict(sample)
    last = dataset.dates[-1]
    dates = tuple(last + dt.timedelta(days=h + 1) for h in range(ckpt.t_out))
    return FutureForecast(patch_ids=tuple(dataset.patch_ids), dates=dates, pred_st=y_st, pred_phy=y_phy)
