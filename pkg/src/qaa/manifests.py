"""Observation manifests: CSV rows pointing at ``.npy`` patch-feature files."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError
from .retrieval import Position

COLUMNS = ("id", "place_id", "domain_id", "x_m", "y_m", "frame_idx", "feature_path")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    place_id: int
    domain_id: int
    x_m: float
    y_m: float
    frame_idx: int | None
    feature_path: str

    def position(self, kind: str = "xy") -> Position:
        if kind == "frame":
            if self.frame_idx is None:
                raise DataError(f"record {self.id!r} has no frame index")
            return Position.frame(self.frame_idx)
        return Position.xy(self.x_m, self.y_m)


def write_manifest(observations, path, feature_dir="features") -> list:
    """Save each observation's patches as ``<feature_dir>/<id>.npy`` next to ``path``."""
    path = Path(path)
    fdir = path.parent / feature_dir
    fdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for o in observations:
        if not o.obs_id:
            raise DataError("observation without an id cannot be written to a manifest")
        rel = f"{feature_dir}/{o.obs_id}.npy"
        np.save(path.parent / rel, np.asarray(o.patches, dtype=np.float64))
        rows.append(ManifestRow(o.obs_id, o.place_id, o.domain_id, o.position[0], o.position[1],
                                o.frame_idx, rel))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in rows:
            w.writerow([r.id, r.place_id, r.domain_id, f"{r.x_m:.6f}", f"{r.y_m:.6f}",
                        "" if r.frame_idx is None else r.frame_idx, r.feature_path])
    return rows


def read_manifest(path) -> list:
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: manifest is missing column(s) {', '.join(missing)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                rows.append(ManifestRow(
                    rec["id"], int(rec["place_id"]), int(rec["domain_id"]), float(rec["x_m"]),
                    float(rec["y_m"]), int(rec["frame_idx"]) if rec["frame_idx"] else None,
                    rec["feature_path"],
                ))
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: manifest has no records")
    return rows


def load_features(rows, base_dir) -> np.ndarray:
    """Stack the referenced feature maps into ``(N, P, C_o)``."""
    base = Path(base_dir)
    maps = []
    for r in rows:
        p = base / r.feature_path
        if not p.exists():
            raise FileNotFoundError(f"feature file for record {r.id!r} not found: {p}")
        maps.append(np.load(p))
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionError(f"feature maps have mixed shapes: {sorted(shapes)}")
    return np.stack(maps)
