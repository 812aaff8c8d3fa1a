"""Query-based adaptive aggregation head.

Pipeline for one feature map ``X`` (P x C_o):

    q_f_hat = Q_f + MHA_fs(Q_f, Q_f, Q_f)              # cacheable
    f_hat   = Q_r + MHA_rs(Q_r, Q_r, Q_r)              # cacheable
    p_hat   = proj(MHA_fp(q_f_hat, X, X))              # N_q x C_f
    S       = f_hat.T @ p_hat                          # C_r x C_f
    desc    = l2(intra_l2(S))                          # length C_r * C_f

The descriptor is laid out as C_f contiguous blocks of C_r values, i.e. the
columns of ``S`` one after another, so each intra-normalised column is a
contiguous slice.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .attn_kernels import MhaParams, largest_divisor_at_most, linear, mha_forward, mha_forward_tape
from .errors import ConfigError, DegenerateDescriptorError, DimensionError

COLUMN_EPS = 1e-12


@dataclass(frozen=True)
class QaaConfig:
    n_q: int = 16
    c_o: int = 64
    c_f: int = 8
    c_r: int = 16
    heads: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"QaaConfig.{name} must be a positive integer, got {value!r}")

    @property
    def c_d(self) -> int:
        return self.c_r * self.c_f

    def heads_for(self, d_model: int) -> int:
        """Head count actually used by a block of width ``d_model``."""
        return largest_divisor_at_most(d_model, self.heads)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "QaaConfig":
        known = {k: d[k] for k in ("n_q", "c_o", "c_f", "c_r", "heads") if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config field(s): {', '.join(sorted(unknown))}")
        return cls(**known)


@dataclass
class FeatureMap:
    patches: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=float)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise DimensionError(f"feature map must be P x C_o with P >= 1, got {self.patches.shape}")
        if not np.all(np.isfinite(self.patches)):
            raise DimensionError(f"feature map {self.image_id!r} has non-finite entries")


@dataclass
class Descriptor:
    values: np.ndarray
    image_id: str = ""


@dataclass(frozen=True)
class ImageSpec:
    height: int = 322
    width: int = 322
    stride: int = 14

    def __post_init__(self):
        if self.height % self.stride or self.width % self.stride:
            raise ConfigError(
                f"image {self.height}x{self.width} is not a multiple of patch stride {self.stride}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class QaaParams:
    config: QaaConfig
    q_f: np.ndarray
    q_r: np.ndarray
    feat_self_attn: MhaParams
    feat_pred_attn: MhaParams
    proj_w: np.ndarray
    proj_b: np.ndarray
    ref_self_attn: MhaParams

    def __post_init__(self):
        c = self.config
        expect = {
            "q_f": (c.n_q, c.c_o),
            "q_r": (c.n_q, c.c_r),
            "proj_w": (c.c_o, c.c_f),
            "proj_b": (c.c_f,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"QaaParams.{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name, width in (("feat_self_attn", c.c_o), ("feat_pred_attn", c.c_o), ("ref_self_attn", c.c_r)):
            if getattr(self, name).d_model != width:
                raise DimensionError(f"QaaParams.{name} has d_model {getattr(self, name).d_model}, expected {width}")

    @classmethod
    def init(cls, config: QaaConfig, seed: int = 0, dtype=np.float64) -> "QaaParams":
        rng = np.random.default_rng(seed)

        def uniform(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, size=shape).astype(dtype)

        c = config
        return cls(
            config=c,
            q_f=uniform((c.n_q, c.c_o), c.c_o),
            q_r=uniform((c.n_q, c.c_r), c.c_r),
            feat_self_attn=MhaParams.init(c.c_o, c.heads_for(c.c_o), rng, dtype),
            feat_pred_attn=MhaParams.init(c.c_o, c.heads_for(c.c_o), rng, dtype),
            proj_w=uniform((c.c_o, c.c_f), c.c_o),
            proj_b=np.zeros(c.c_f, dtype=dtype),
            ref_self_attn=MhaParams.init(c.c_r, c.heads_for(c.c_r), rng, dtype),
        )

    # Flat name -> array views, used by the optimiser and the checkpoint writer.
    def named_arrays(self) -> dict:
        out = {"q_f": self.q_f, "q_r": self.q_r, "proj_w": self.proj_w, "proj_b": self.proj_b}
        for block in ("feat_self_attn", "feat_pred_attn", "ref_self_attn"):
            for n, a in getattr(self, block).arrays().items():
                out[f"{block}.{n}"] = a
        return out

    @classmethod
    def from_arrays(cls, config: QaaConfig, arrays: dict) -> "QaaParams":
        blocks = {}
        for block, width in (("feat_self_attn", config.c_o), ("feat_pred_attn", config.c_o),
                             ("ref_self_attn", config.c_r)):
            kw = {n: np.asarray(arrays[f"{block}.{n}"]) for n in MhaParams.array_names()}
            blocks[block] = MhaParams(heads=config.heads_for(width), **kw)
        return cls(config=config, q_f=np.asarray(arrays["q_f"]), q_r=np.asarray(arrays["q_r"]),
                   proj_w=np.asarray(arrays["proj_w"]), proj_b=np.asarray(arrays["proj_b"]), **blocks)

    def copy(self) -> "QaaParams":
        return QaaParams.from_arrays(self.config, {k: v.copy() for k, v in self.named_arrays().items()})

    def num_params(self) -> int:
        return int(sum(a.size for a in self.named_arrays().values()))


@dataclass(frozen=True)
class InferenceCache:
    q_f_hat: np.ndarray
    f_hat: np.ndarray


def _patches(x):
    if isinstance(x, FeatureMap):
        return x.patches
    return np.asarray(x, dtype=float)


def refine_feature_queries(params: QaaParams) -> np.ndarray:
    q = params.q_f
    out, _ = mha_forward(q, q, q, params.feat_self_attn)
    return q + out


def build_reference_codebook(params: QaaParams) -> np.ndarray:
    q = params.q_r
    out, _ = mha_forward(q, q, q, params.ref_self_attn)
    return q + out


def predict_query_features(q_f_hat, x, params: QaaParams) -> np.ndarray:
    """Query-level features ``(..., N_q, C_f)`` for one map or a batch of maps."""
    patches = _patches(x)
    if patches.shape[-1] != params.config.c_o:
        raise DimensionError(
            f"feature map has {patches.shape[-1]} channels, model expects C_o={params.config.c_o}"
        )
    attended, _ = mha_forward(q_f_hat, patches, patches, params.feat_pred_attn)
    return linear(attended, params.proj_w, params.proj_b)


def predict_query_features_tape(q_f_hat, patches, params: QaaParams):
    attended, attn, tape = mha_forward_tape(q_f_hat, patches, patches, params.feat_pred_attn)
    return linear(attended, params.proj_w, params.proj_b), attended, attn, tape


def cross_query_similarity(f_hat, p_hat) -> np.ndarray:
    f_hat = np.asarray(f_hat)
    p_hat = np.asarray(p_hat)
    if f_hat.shape[-2] != p_hat.shape[-2]:
        raise DimensionError(
            f"query count mismatch: f_hat has {f_hat.shape[-2]} rows, p_hat has {p_hat.shape[-2]}"
        )
    return np.swapaxes(f_hat, -1, -2) @ p_hat


def _column_norms(s):
    return np.sqrt(np.sum(s * s, axis=-2, keepdims=True))


def normalize_descriptor(s) -> np.ndarray:
    """Intra-L2 over each C_r column of ``S`` then global L2; returns ``(..., C_d)``.

    Columns whose norm is below ``COLUMN_EPS`` are left as zeros. An all-zero
    ``S`` raises :class:`DegenerateDescriptorError`.
    """
    s = np.asarray(s, dtype=float)
    norms = _column_norms(s)
    safe = np.where(norms < COLUMN_EPS, 1.0, norms)
    cols = np.where(norms < COLUMN_EPS, 0.0, s / safe)
    flat = np.swapaxes(cols, -1, -2).reshape(*s.shape[:-2], -1)
    total = np.linalg.norm(flat, axis=-1, keepdims=True)
    if np.any(total < COLUMN_EPS):
        raise DegenerateDescriptorError("degenerate descriptor: similarity matrix is all zeros")
    return flat / total


def normalize_descriptor_backward(s, d_desc) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    norms = _column_norms(s)
    dead = norms < COLUMN_EPS
    safe = np.where(dead, 1.0, norms)
    cols = np.where(dead, 0.0, s / safe)
    flat = np.swapaxes(cols, -1, -2).reshape(*s.shape[:-2], -1)
    total = np.linalg.norm(flat, axis=-1, keepdims=True)
    out = flat / total
    d_flat = (d_desc - out * np.sum(out * d_desc, axis=-1, keepdims=True)) / total
    d_cols = np.swapaxes(d_flat.reshape(*s.shape[:-2], s.shape[-1], s.shape[-2]), -1, -2)
    d_s = (d_cols - cols * np.sum(cols * d_cols, axis=-2, keepdims=True)) / safe
    return np.where(dead, 0.0, d_s)


def cache_queries(params: QaaParams) -> InferenceCache:
    return InferenceCache(refine_feature_queries(params), build_reference_codebook(params))


def aggregate(x, params: QaaParams, cache: InferenceCache | None = None) -> Descriptor:
    if cache is None:
        cache = cache_queries(params)
    p_hat = predict_query_features(cache.q_f_hat, x, params)
    values = normalize_descriptor(cross_query_similarity(cache.f_hat, p_hat))
    return Descriptor(values, x.image_id if isinstance(x, FeatureMap) else "")


def aggregate_batch(patches, params: QaaParams, cache: InferenceCache | None = None) -> np.ndarray:
    """Descriptors ``(B, C_d)`` for a stacked ``(B, P, C_o)`` array of feature maps."""
    if cache is None:
        cache = cache_queries(params)
    p_hat = predict_query_features(cache.q_f_hat, patches, params)
    return normalize_descriptor(cross_query_similarity(cache.f_hat, p_hat))


def config_json(config: QaaConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
