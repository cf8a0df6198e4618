"""Case-count ingestion, chronological splits, min-max scaling and windowing.

Feature channels are ordered (active, recovered, susceptible) and stored as
raw person counts.  The neural path consumes normalized windows while the
epidemic dynamics consume the raw counts that travel with each window.
"""
from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InputError
from .geo_graph import PatchMeta, read_patch_meta

log = logging.getLogger(__name__)

ACTIVE, RECOVERED, SUSCEPTIBLE = 0, 1, 2
CHANNELS = ("active", "recovered", "susceptible")
CASES_HEADER = ["date", "patch_id", "active", "recovered", "susceptible"]


@dataclass(frozen=True, eq=False)
class EpidemicDataset:
    patches: tuple
    dates: tuple
    features: np.ndarray  # N x T x 3, person counts
    name: str = "dataset"

    def __post_init__(self):
        f = np.array(self.features, dtype=float)
        n, t = len(self.patches), len(self.dates)
        if f.shape != (n, t, 3):
            raise InputError(f"features must have shape {(n, t, 3)}, got {f.shape}")
        if not np.all(np.isfinite(f)) or np.any(f < 0):
            raise InputError("features must be finite and non-negative")
        days = [d.toordinal() for d in self.dates]
        if any(b - a != 1 for a, b in zip(days, days[1:])):
            raise InputError("dates must form a contiguous daily grid")
        f.setflags(write=False)
        object.__setattr__(self, "patches", tuple(self.patches))
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "features", f)
        over = f.sum(axis=2) > self.population[:, None]
        if over.any():
            i, j = np.argwhere(over)[0]
            log.warning(
                "S+I+R exceeds population in %d cells (first: patch %s on %s)",
                int(over.sum()), self.patches[i].patch_id, self.dates[j],
            )

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def n_days(self) -> int:
        return len(self.dates)

    @property
    def patch_ids(self) -> list:
        return [p.patch_id for p in self.patches]

    @property
    def population(self) -> np.ndarray:
        return np.array([p.population for p in self.patches], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "meta": [
                {"patch_id": p.patch_id, "name": p.name, "population": p.population, "lat": p.lat, "lon": p.lon}
                for p in self.patches
            ],
            "dates": [d.isoformat() for d in self.dates],
            "features": self.features.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EpidemicDataset":
        try:
            return cls(
                patches=tuple(PatchMeta(**m) for m in doc["meta"]),
                dates=tuple(dt.date.fromisoformat(d) for d in doc["dates"]),
                features=np.array(doc["features"], dtype=float),
                name=doc.get("name", "dataset"),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed dataset snapshot: {exc}") from exc

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def summary(self) -> dict:
        """Shape and active-case statistics in the layout of a dataset table."""
        active = self.features[:, :, ACTIVE]
        return {
            "name": self.name,
            "n_patches": self.n_patches,
            "n_days": self.n_days,
            "size": f"{self.n_patches}x{self.n_days}",
            "start": self.dates[0].isoformat(),
            "end": self.dates[-1].isoformat(),
            "min": float(active.min()),
            "max": float(active.max()),
            "mean": float(active.mean()),
            "std": float(active.std()),
            "hash": self.content_hash(),
        }


def save_snapshot(d: EpidemicDataset, path) -> None:
    Path(path).write_text(json.dumps(d.to_dict()))


def load_snapshot(path) -> EpidemicDataset:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read snapshot {path}: {exc}") from exc
    return EpidemicDataset.from_dict(doc)


def _parse_date(text, where):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        raise InputError(f"{where}: bad ISO date {text!r}") from exc


def ingest(cases_csv, meta_csv, name: Optional[str] = None) -> EpidemicDataset:
    """Load a long-format cases file into a dense dataset.

    Patch order follows the metadata file; dates are sorted ascending and must
    cover every day between the first and last date for every patch.
    """
    metas = read_patch_meta(meta_csv)
    index = {m.patch_id: k for k, m in enumerate(metas)}
    cases_csv = Path(cases_csv)
    cells: dict = {}
    with cases_csv.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CASES_HEADER:
            raise InputError(f"{cases_csv}: header must be {','.join(CASES_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{cases_csv}:{lineno}"
            if len(row) != 5:
                raise InputError(f"{where}: expected 5 fields, got {len(row)}")
            day = _parse_date(row[0], where)
            pid = row[1].strip()
            if pid not in index:
                raise InputError(f"{where}: unknown patch_id {pid!r}")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise InputError(f"{where}: {exc}") from exc
            if (pid, day) in cells:
                raise InputError(f"{where}: duplicate row for patch {pid} on {day}")
            cells[(pid, day)] = values
    if not cells:
        raise InputError(f"{cases_csv}: no data rows")
    first = min(d for _, d in cells)
    last = max(d for _, d in cells)
    dates = [first + dt.timedelta(days=k) for k in range((last - first).days + 1)]
    features = np.empty((len(metas), len(dates), 3))
    for i, m in enumerate(metas):
        for t, day in enumerate(dates):
            try:
                features[i, t] = cells[(m.patch_id, day)]
            except KeyError:
                raise InputError(f"{cases_csv}: missing row for patch {m.patch_id} on {day.isoformat()}") from None
    return EpidemicDataset(
        patches=tuple(metas), dates=tuple(dates), features=features, name=name or cases_csv.stem
    )


def export_cases(d: EpidemicDataset, path) -> None:
    """Write the cases file that :func:`ingest` reads back bit-exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CASES_HEADER)
        for t, day in enumerate(d.dates):
            for i, p in enumerate(d.patches):
                writer.writerow([day.isoformat(), p.patch_id, *(repr(float(v)) for v in d.features[i, t])])


@dataclass(frozen=True)
class Span:
    name: str
    start: int
    stop: int  # exclusive

    def __len__(self):
        return self.stop - self.start


def chronological_split(n_days: int, ratios=(0.6, 0.2, 0.2), min_length: int = 1) -> tuple[Span, Span, Span]:
    """Contiguous train/val/test spans, boundaries at floor(cumulative ratio * T)."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ConfigurationError(f"split ratios must be three positive numbers, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigurationError(f"split ratios must sum to 1, got {sum(ratios)}")
    # the epsilon absorbs representation error such as 0.6 + 0.2 = 0.8000000000000002
    b1 = math.floor(ratios[0] * n_days + 1e-9)
    b2 = math.floor((ratios[0] + ratios[1]) * n_days + 1e-9)
    spans = (Span("train", 0, b1), Span("val", b1, b2), Span("test", b2, n_days))
    for s in spans:
        if len(s) < min_length:
            raise ConfigurationError(
                f"{s.name} span has {len(s)} days but windows need at least {min_length}"
            )
    return spans


@dataclass(frozen=True, eq=False)
class Scaler:
    """Per-patch, per-channel min-max statistics (N x C)."""

    lo: np.ndarray
    hi: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.hi == self.lo

    @property
    def span(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def inv_span(self) -> np.ndarray:
        s = self.span
        return np.where(s > 0, 1.0 / np.where(s > 0, s, 1.0), 0.0)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "Scaler":
        return cls(lo=np.array(doc["lo"], dtype=float), hi=np.array(doc["hi"], dtype=float))


def fit_scaler(train_features: np.ndarray) -> Scaler:
    """Fit on an N x T x C training slice only."""
    x = np.asarray(train_features, dtype=float)
    return Scaler(lo=x.min(axis=1), hi=x.max(axis=1))


def _stats(s: Scaler, x, channel):
    lo, inv, span = s.lo, s.inv_span, s.span
    if channel is not None:
        lo, inv, span = lo[:, channel], inv[:, channel], span[:, channel]
        extra = x.ndim - 1
    else:
        extra = x.ndim - 2
    shape = (lo.shape[0],) + (1,) * extra + lo.shape[1:]
    return lo.reshape(shape), inv.reshape(shape), span.reshape(shape)


def normalize(x, s: Scaler, channel: Optional[int] = None):
    """Map raw counts to the training range (0 at min, 1 at max, no clipping).

    Without ``channel`` the last axis of ``x`` is the channel axis; with it,
    ``x`` holds that single channel (e.g. N x T' active cases).  Degenerate
    channels map to 0.
    """
    lo, inv, _ = _stats(s, x, channel)
    return (x - lo) * inv


def denormalize(y, s: Scaler, channel: Optional[int] = None):
    lo, _, span = _stats(s, y, channel)
    return y * span + lo


@dataclass(frozen=True, eq=False)
class WindowSample:
    input: np.ndarray  # N x T_in x C, normalized
    raw_input: np.ndarray  # N x T_in x C, person counts
    target: np.ndarray  # N x T_out, normalized active cases
    raw_target: np.ndarray  # N x T_out, active cases
    anchor_date: dt.date  # last input day
    start: int  # dataset index of the first input day

    @property
    def raw_last_day(self) -> np.ndarray:
        return self.raw_input[:, -1, :]

    @property
    def t_in(self) -> int:
        return self.input.shape[1]

    @property
    def t_out(self) -> int:
        return self.target.shape[1]


def make_windows(d: EpidemicDataset, span: Span, s: Scaler, t_in: int, t_out: int) -> list[WindowSample]:
    """Stride-1 windows fully contained in ``span``."""
    if t_in < 1 or t_out < 1:
        raise ConfigurationError("t_in and t_out must be positive")
    if len(span) < t_in + t_out:
        raise ConfigurationError(f"{span.name} span of {len(span)} days is shorter than t_in + t_out = {t_in + t_out}")
    raw = d.features
    norm = normalize(raw, s)
    windows = []
    for a in range(span.start, span.stop - t_in - t_out + 1):
        b = a + t_in
        windows.append(
            WindowSample(
                input=norm[:, a:b, :],
                raw_input=raw[:, a:b, :],
                target=norm[:, b : b + t_out, ACTIVE],
                raw_target=raw[:, b : b + t_out, ACTIVE],
                anchor_date=d.dates[b - 1],
                start=a,
            )
        )
    return windows


def latest_window(d: EpidemicDataset, s: Scaler, t_in: int) -> WindowSample:
    """Input window over the last ``t_in`` days, for forecasting past the data end.

    The targets are empty (N x 0); the model decides the horizon.
    """
    if not 1 <= t_in <= d.n_days:
        raise ConfigurationError(f"need 1 <= t_in <= {d.n_days} days, got {t_in}")
    a = d.n_days - t_in
    raw = d.features[:, a:, :]
    empty = np.zeros((d.n_patches, 0))
    return WindowSample(
        input=normalize(raw, s),
        raw_input=raw,
        target=empty,
        raw_target=empty,
        anchor_date=d.dates[-1],
        start=a,
    )
