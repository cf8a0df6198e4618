"""Gravity-model patch graph.

Edge weights follow ``w_ij = p_i**alpha1 * p_j**alpha2 * exp(-d_ij / r)``.
Each patch keeps its ``top_e`` strongest links, and the resulting mask is
symmetrized so that mobility flows between patches conserve population.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import GraphError, InputError, NumericError

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class PatchMeta:
    patch_id: str
    name: str
    population: float
    lat: float
    lon: float

    def __post_init__(self):
        if not (self.population > 0) or not math.isfinite(self.population):
            raise InputError(f"patch {self.patch_id!r}: population must be positive, got {self.population}")


@dataclass(frozen=True)
class GravityHyper:
    """Gravity-model hyperparameters.

    ``r=None`` means "use the median pairwise distance of the dataset"; it is
    resolved by :func:`build_graph`.
    """

    alpha1: float = 1.0
    alpha2: float = 1.0
    r: Optional[float] = None
    top_e: int = 3

    def __post_init__(self):
        if self.r is not None and not self.r > 0:
            raise InputError(f"gravity distance scale r must be > 0, got {self.r}")
        if int(self.top_e) != self.top_e or self.top_e < 1:
            raise InputError(f"top_e must be a positive integer, got {self.top_e}")


def _check_coords(lat, lon):
    if not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
        raise InputError(f"coordinates out of range: lat={lat}, lon={lon}")


def haversine_distance(a: PatchMeta, b: PatchMeta) -> float:
    """Great-circle distance in km between two patch centroids."""
    _check_coords(a.lat, a.lon)
    _check_coords(b.lat, b.lon)
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def pairwise_distances(metas: Sequence[PatchMeta]) -> np.ndarray:
    n = len(metas)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = haversine_distance(metas[i], metas[j])
    return d


def gravity_weight(p_i, p_j, d_ij, h: GravityHyper):
    """Gravity attraction between two patches; works elementwise on arrays."""
    if h.r is None:
        raise InputError("gravity_weight needs a resolved distance scale r")
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    d_ij = np.asarray(d_ij, dtype=float)
    if np.any(p_i <= 0) or np.any(p_j <= 0):
        raise InputError("populations must be positive")
    if np.any(d_ij < 0):
        raise InputError("distances must be non-negative")
    with np.errstate(over="ignore", invalid="ignore"):
        w = p_i ** h.alpha1 * p_j ** h.alpha2 * np.exp(-d_ij / h.r)
    if not np.all(np.isfinite(w)):
        raise NumericError("gravity weight overflowed; rescale populations or exponents")
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True, eq=False)
class PatchGraph:
    """Immutable undirected patch graph.

    ``adjacency`` is binary, symmetric and zero on the diagonal; ``weights``
    holds the raw gravity weights (diagonal zero).
    """

    adjacency: np.ndarray
    weights: np.ndarray
    patch_ids: tuple = field(default=())
    gravity: Optional[GravityHyper] = None

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=float)
        w = np.array(self.weights, dtype=float)
        n = a.shape[0]
        if a.shape != (n, n) or w.shape != (n, n):
            raise InputError("adjacency and weights must be square and of equal shape")
        if not np.all((a == 0) | (a == 1)):
            raise InputError("adjacency must be binary")
        if not np.array_equal(a, a.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise GraphError("self-loops are not allowed")
        if np.any(w < 0):
            raise InputError("edge weights must be non-negative")
        if np.any((a == 1) & (w <= 0)):
            raise GraphError("every edge needs a strictly positive weight; try a larger distance scale r")
        isolated = np.flatnonzero(a.sum(axis=1) == 0)
        if isolated.size:
            raise GraphError(f"isolated patches (degree 0): {isolated.tolist()}")
        a.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "weights", w)
        ids = tuple(self.patch_ids) if self.patch_ids else tuple(str(i) for i in range(n))
        if len(ids) != n:
            raise InputError("patch_ids length does not match adjacency")
        object.__setattr__(self, "patch_ids", ids)

    @classmethod
    def from_adjacency(cls, adjacency, patch_ids=()) -> "PatchGraph":
        a = np.asarray(adjacency, dtype=float)
        return cls(adjacency=a, weights=a.copy(), patch_ids=tuple(patch_ids))

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @cached_property
    def neighbor_sets(self) -> tuple:
        return tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in self.adjacency)

    @cached_property
    def degree(self) -> np.ndarray:
        deg = self.adjacency.sum(axis=1).astype(int)
        deg.setflags(write=False)
        return deg

    @cached_property
    def mobility_matrix(self) -> np.ndarray:
        """``M[i, j] = P(j|i)`` if j is a neighbour of i, else 0.

        Columns sum to one, so ``M @ outflow`` redistributes every emigrant.
        """
        m = self.adjacency / self.degree[None, :]
        m.setflags(write=False)
        return m

    def edge_index(self):
        """(dst, src) arrays, one entry per directed edge, grouped by dst."""
        dst, src = np.nonzero(self.adjacency)
        return dst.astype(np.int64), src.astype(np.int64)

    def permuted(self, perm) -> "PatchGraph":
        """Relabel patches so that new patch k is old patch ``perm[k]``."""
        perm = np.asarray(perm)
        return PatchGraph(
            adjacency=self.adjacency[np.ix_(perm, perm)],
            weights=self.weights[np.ix_(perm, perm)],
            patch_ids=tuple(self.patch_ids[k] for k in perm),
            gravity=self.gravity,
        )


def mobility_probability(g: PatchGraph, j: int) -> float:
    """Probability that an emigrant from patch j lands in any one neighbour."""
    deg = int(g.adjacency[j].sum())
    if deg == 0:
        raise GraphError(f"patch {j} is isolated")
    return 1.0 / deg


def resolve_hyper(h: GravityHyper, distances: np.ndarray) -> GravityHyper:
    if h.r is not None:
        return h
    n = distances.shape[0]
    off = distances[np.triu_indices(n, k=1)]
    r = float(np.median(off))
    if not r > 0:
        raise InputError("median pairwise distance is zero; set r explicitly")
    return GravityHyper(alpha1=h.alpha1, alpha2=h.alpha2, r=r, top_e=h.top_e)


def build_graph(
    metas: Sequence[PatchMeta],
    h: GravityHyper = GravityHyper(),
    distance_override: Optional[np.ndarray] = None,
) -> PatchGraph:
    """Build the sparsified gravity graph.

    The hyperparameters actually used (with ``r`` resolved) are kept on
    ``graph.gravity``.
    """
    n = len(metas)
    if n < 2:
        raise InputError("need at least two patches")
    ids = [m.patch_id for m in metas]
    if len(set(ids)) != n:
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise InputError(f"duplicate patch_id: {dupes}")
    if h.top_e >= n:
        raise InputError(f"top_e={h.top_e} must be smaller than the number of patches ({n})")

    if distance_override is not None:
        d = np.asarray(distance_override, dtype=float)
        if d.shape != (n, n):
            raise InputError(f"distance matrix must be {n}x{n}")
        if not np.array_equal(d, d.T) or np.any(d < 0) or np.any(np.diag(d) != 0):
            raise InputError("distance matrix must be symmetric, non-negative, zero-diagonal")
    else:
        d = pairwise_distances(metas)
    h = resolve_hyper(h, d)

    pop = np.array([m.population for m in metas], dtype=float)
    w = gravity_weight(pop[:, None], pop[None, :], d, h)
    np.fill_diagonal(w, 0.0)

    # stable sort on -w keeps the lower index first among ties
    score = -w.copy()
    np.fill_diagonal(score, np.inf)
    order = np.argsort(score, axis=1, kind="stable")[:, : h.top_e]
    a = np.zeros((n, n))
    a[np.arange(n)[:, None], order] = 1.0
    a = np.maximum(a, a.T)
    return PatchGraph(adjacency=a, weights=w, patch_ids=tuple(ids), gravity=h)


def read_patch_meta(path) -> list[PatchMeta]:
    """Read ``patch_id,name,population,lat,lon`` rows."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = ["patch_id", "name", "population", "lat", "lon"]
        if reader.fieldnames != expected:
            raise InputError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        metas = []
        for lineno, row in enumerate(reader, start=2):
            try:
                metas.append(
                    PatchMeta(
                        patch_id=row["patch_id"].strip(),
                        name=row["name"],
                        population=float(row["population"]),
                        lat=float(row["lat"]),
                        lon=float(row["lon"]),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            _check_coords(metas[-1].lat, metas[-1].lon)
    ids = [m.patch_id for m in metas]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate patch_id")
    return metas


def write_patch_meta(metas: Sequence[PatchMeta], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "name", "population", "lat", "lon"])
        for m in metas:
            writer.writerow([m.patch_id, m.name, repr(float(m.population)), repr(float(m.lat)), repr(float(m.lon))])


def read_distance_matrix(path, patch_ids: Sequence[str]) -> np.ndarray:
    """Square CSV with a patch_id header row and a patch_id first column."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty distance file")
    header = [c.strip() for c in rows[0][1:]]
    body = {r[0].strip(): r[1:] for r in rows[1:] if r}
    if sorted(header) != sorted(patch_ids) or sorted(body) != sorted(patch_ids):
        raise InputError(f"{path}: patch ids do not match the metadata file")
    col = {pid: k for k, pid in enumerate(header)}
    try:
        d = np.array([[float(body[a][col[b]]) for b in patch_ids] for a in patch_ids])
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    return d
