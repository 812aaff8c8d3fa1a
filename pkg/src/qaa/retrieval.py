"""Exhaustive descriptor retrieval and Recall@K under distance or frame criteria."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CriterionError, DataError, DimensionError
from .formats import read_descriptors, write_descriptors

EARTH_RADIUS_M = 6_371_000.0
NORM_TOL = 1e-5


@dataclass(frozen=True)
class Position:
    """Exactly one of planar metres, geodetic degrees, or a frame index."""

    kind: str  # "xy" | "geo" | "frame"
    value: tuple

    @classmethod
    def xy(cls, x, y):
        return cls("xy", (float(x), float(y)))

    @classmethod
    def geo(cls, lat, lon):
        _check_latlon(lat, lon)
        return cls("geo", (float(lat), float(lon)))

    @classmethod
    def frame(cls, idx):
        return cls("frame", (int(idx),))


@dataclass
class PlaceRecord:
    record_id: str
    descriptor: np.ndarray
    position: Position
    dataset: str = ""


@dataclass(frozen=True)
class PositiveCriterion:
    kind: str  # "distance_m" | "frames"
    threshold: float

    def __post_init__(self):
        if self.kind not in ("distance_m", "frames"):
            raise CriterionError(f"unknown criterion kind {self.kind!r}")
        if not self.threshold > 0:
            raise CriterionError("criterion threshold must be > 0")

    @classmethod
    def parse(cls, text: str) -> "PositiveCriterion":
        """``"distance:25"`` or ``"frames:10"``."""
        kind, _, thr = text.partition(":")
        kind = {"distance": "distance_m", "distance_m": "distance_m", "frames": "frames"}.get(kind)
        if kind is None or not thr:
            raise CriterionError(f"cannot parse criterion {text!r}; use distance:<m> or frames:<n>")
        return cls(kind, float(thr))

    def label(self) -> str:
        return f"{self.kind}({self.threshold:g})"


def _check_latlon(lat, lon):
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        raise ValueError(f"coordinates out of range: lat={lat}, lon={lon}")


def haversine(lat1, lon1, lat2, lon2) -> float:
    for lat, lon in ((lat1, lon1), (lat2, lon2)):
        _check_latlon(lat, lon)
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    a = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def is_positive(query: Position, ref: Position, criterion: PositiveCriterion) -> bool:
    if query.kind != ref.kind:
        raise CriterionError(f"position kinds differ: query {query.kind}, database {ref.kind}")
    if criterion.kind == "frames":
        if query.kind != "frame":
            raise CriterionError("frames criterion needs frame-indexed positions")
        return abs(query.value[0] - ref.value[0]) <= criterion.threshold
    if query.kind == "frame":
        raise CriterionError("distance criterion needs planar or geodetic positions")
    if query.kind == "xy":
        d = math.hypot(query.value[0] - ref.value[0], query.value[1] - ref.value[1])
    else:
        d = haversine(*query.value, *ref.value)
    return d <= criterion.threshold


@dataclass
class RetrievalIndex:
    matrix: np.ndarray
    ids: list
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(records) -> RetrievalIndex:
    records = list(records)
    if not records:
        raise DataError("cannot build an index from zero records")
    dims = {np.asarray(r.descriptor).shape for r in records}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionError(f"records have mixed descriptor shapes: {sorted(dims)}")
    matrix = np.stack([np.asarray(r.descriptor, dtype=float) for r in records])
    return _index_from_matrix(matrix, [r.record_id for r in records], records)


def index_from_arrays(matrix, ids) -> RetrievalIndex:
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or len(matrix) != len(ids) or not len(ids):
        raise DimensionError(f"descriptor matrix {matrix.shape} does not match {len(ids)} ids")
    return _index_from_matrix(matrix, list(ids), [])


def save_index(index: RetrievalIndex, path) -> None:
    """Descriptor file plus id sidecar; positions are not stored."""
    write_descriptors(path, index.matrix, index.ids)


def load_index(path) -> RetrievalIndex:
    matrix, ids = read_descriptors(path)
    return index_from_arrays(matrix, ids)


def _index_from_matrix(matrix, ids, records):
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
    if len(bad):
        raise DataError(f"record {ids[bad[0]]!r} has descriptor norm {norms[bad[0]]:.6g}, expected 1")
    return RetrievalIndex(matrix, ids, records)


@dataclass
class TopK:
    hits: list  # (id, score) pairs, best first
    truncated: bool = False


def _rank(scores, ids):
    # lexsort: last key is primary; ties fall back to ascending id
    return np.lexsort((np.asarray(ids, dtype=object).astype(str), -scores))


def top_k(query, index: RetrievalIndex, k: int) -> TopK:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query.values if hasattr(query, "values") else query, dtype=float)
    if q.shape != (index.dim,):
        raise DimensionError(f"query has shape {q.shape}, index dimension is {index.dim}")
    scores = index.matrix @ q
    order = _rank(scores, index.ids)[:k]
    return TopK([(index.ids[i], float(scores[i])) for i in order], truncated=k > len(index))


def top_k_batch(queries, index: RetrievalIndex, k: int) -> np.ndarray:
    """Row indices into the index of the top-``k`` hits for each query row."""
    scores = np.asarray(queries, dtype=float) @ index.matrix.T
    k = min(k, len(index))
    id_keys = np.asarray(index.ids, dtype=object).astype(str)
    return np.stack([np.lexsort((id_keys, -row))[:k] for row in scores]) if len(scores) else np.zeros((0, k), int)


@dataclass
class RecallReport:
    k: int
    criterion: PositiveCriterion
    recall: float
    evaluated: int
    excluded: int


def recall_at_k(query_desc, query_positions, index: RetrievalIndex, db_positions, k: int,
                criterion: PositiveCriterion) -> RecallReport:
    """Fraction of queries with a positive among their top-``k``.

    Queries with no positive anywhere in the database are excluded from the
    denominator and counted in ``excluded``.
    """
    query_desc = np.asarray(query_desc, dtype=float)
    if len(query_desc) != len(query_positions):
        raise DataError("query descriptors and positions differ in length")
    if len(db_positions) != len(index):
        raise DataError("database positions do not match index size")
    kinds = {p.kind for p in query_positions} | {p.kind for p in db_positions}
    if len(kinds) > 1:
        raise CriterionError(f"mixed position kinds: {sorted(kinds)}")
    positive = np.array([[is_positive(q, r, criterion) for r in db_positions] for q in query_positions],
                        dtype=bool).reshape(len(query_positions), len(db_positions))
    ranked = top_k_batch(query_desc, index, k)
    valid = positive.any(axis=1)
    hits = np.array([positive[i, ranked[i]].any() for i in range(len(ranked))], dtype=bool)
    n = int(valid.sum())
    recall = float(hits[valid].mean()) if n else 0.0
    return RecallReport(k, criterion, recall, n, int((~valid).sum()))
