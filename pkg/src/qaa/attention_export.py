"""Per-query attention grids of the feature-prediction block, as CSV and PGM."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .aggregator import FeatureMap, ImageSpec, InferenceCache, QaaParams, cache_queries
from .attn_kernels import mha_forward
from .errors import DimensionError


def attention_maps(x, params: QaaParams, query_ids, img: ImageSpec,
                   cache: InferenceCache | None = None) -> dict:
    """Head-averaged attention of each selected feature query, shaped to the patch grid."""
    patches = x.patches if isinstance(x, FeatureMap) else np.asarray(x, dtype=float)
    gh, gw = img.grid
    if patches.shape[0] != gh * gw:
        raise DimensionError(f"feature map has {patches.shape[0]} patches, image grid is {gh}x{gw}")
    n_q = params.config.n_q
    for q in query_ids:
        if not 0 <= int(q) < n_q:
            raise IndexError(f"query id {q} out of range [0, {n_q})")
    cache = cache or cache_queries(params)
    _, attn = mha_forward(cache.q_f_hat, patches, patches, params.feat_pred_attn)
    mean = attn.mean(axis=0)
    return {int(q): mean[int(q)].reshape(gh, gw) for q in query_ids}


def grid_to_pgm(grid) -> bytes:
    """Binary P5 PGM, min-max scaled to 0..255 (a constant grid maps to 0)."""
    g = np.asarray(grid, dtype=float)
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii")
    return header + pix.tobytes()


def grid_to_csv(grid) -> str:
    return "\n".join(",".join(f"{v:.9g}" for v in row) for row in np.asarray(grid)) + "\n"


def export_attention_maps(x, params: QaaParams, query_ids, img: ImageSpec, out_dir,
                          image_id: str | None = None) -> dict:
    """Write ``<image_id>_q<k>.csv`` and ``.pgm`` per query; returns the grids."""
    if image_id is None:
        image_id = x.image_id if isinstance(x, FeatureMap) and x.image_id else "image"
    maps = attention_maps(x, params, query_ids, img)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for q, grid in maps.items():
        (out / f"{image_id}_q{q}.csv").write_text(grid_to_csv(grid))
        (out / f"{image_id}_q{q}.pgm").write_bytes(grid_to_pgm(grid))
    return maps
