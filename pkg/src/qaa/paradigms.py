"""Score-normalisation paradigms sharing the reference codebook.

``CS`` uses the query-level features unchanged. ``SOFTMAX`` turns every C_f
column of ``p_hat`` into a distribution over the N_q queries, and ``OT``
rescales ``exp(p_hat / T)`` with Sinkhorn iterations to uniform row and
column marginals. All three feed ``f_hat.T @ scores`` into the same
two-stage L2 normalisation, so descriptors share dimension C_r * C_f.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .aggregator import cross_query_similarity, normalize_descriptor
from .errors import ConfigError, NumericError


class ParadigmKind(str, enum.Enum):
    CS = "cs"
    SOFTMAX = "softmax"
    OT = "ot"

    @classmethod
    def parse(cls, value) -> "ParadigmKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown paradigm {value!r}; expected one of cs, softmax, ot") from None


@dataclass(frozen=True)
class SinkhornConfig:
    max_iters: int = 100
    tol: float = 1e-6
    temperature: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError("SinkhornConfig.max_iters must be >= 1")
        if not self.tol > 0:
            raise ConfigError("SinkhornConfig.tol must be > 0")
        if not self.temperature > 0:
            raise ConfigError("SinkhornConfig.temperature must be > 0")


class SinkhornResult(NamedTuple):
    matrix: np.ndarray
    converged: bool
    iterations: int
    residual: float


def _marginal_residual(k):
    rows, cols = k.shape[-2:]
    r = np.abs(k.sum(axis=-1) - 1.0 / rows).max(axis=-1)
    c = np.abs(k.sum(axis=-2) - 1.0 / cols).max(axis=-1)
    return np.maximum(r, c)


def _sinkhorn(m, cfg: SinkhornConfig, keep_trace: bool):
    m = np.asarray(m, dtype=float)
    rows, cols = m.shape[-2:]
    # Sinkhorn output is invariant to a global scale of K, so shifting by the
    # per-matrix maximum is exact and keeps exp() from overflowing.
    shifted = (m - m.max(axis=(-2, -1), keepdims=True)) / cfg.temperature
    k = np.exp(shifted)
    k0 = k
    lead = m.shape[:-2]
    active = np.ones(lead, dtype=bool)
    trace = []
    iters = 0
    for _ in range(cfg.max_iters):
        iters += 1
        mask = active[..., None, None]
        rs = k.sum(axis=-1, keepdims=True)
        if not np.all(np.isfinite(rs)) or np.any(rs[active] <= 0):
            raise NumericError(
                f"Sinkhorn kernel exp(m/T) underflowed at temperature {cfg.temperature}; "
                "use a larger temperature"
            )
        k_row = np.where(mask, k / rs / rows, k)
        cs = k_row.sum(axis=-2, keepdims=True)
        k_col = np.where(mask, k_row / cs / cols, k_row)
        if keep_trace:
            trace.append((mask, rs, k_row, cs, k_col))
        k = k_col
        res = _marginal_residual(k)
        active = active & (res >= cfg.tol)
        if not active.any():
            break
    res = _marginal_residual(k)
    return k, bool(not active.any()), iters, float(np.max(res)), (k0, trace)


def sinkhorn_normalize(m, cfg: SinkhornConfig = SinkhornConfig()) -> SinkhornResult:
    """Alternate row/column scaling of ``exp(m / T)`` to marginals 1/rows and 1/cols."""
    k, converged, iters, res, _ = _sinkhorn(m, cfg, keep_trace=False)
    return SinkhornResult(k, converged, iters, res)


def sinkhorn_forward_tape(m, cfg: SinkhornConfig):
    k, converged, iters, res, (k0, trace) = _sinkhorn(m, cfg, keep_trace=True)
    return k, (k0, trace, cfg.temperature, m.shape[-2:])


def sinkhorn_backward(tape, d_out):
    k0, trace, temperature, (rows, cols) = tape
    g = np.asarray(d_out, dtype=float)
    for mask, rs, k_row, cs, k_col in reversed(trace):
        # column step: y = x / colsum(x) / cols
        g_col = (g - np.sum(g * k_col, axis=-2, keepdims=True) * cols) / (cs * cols)
        g = np.where(mask, g_col, g)
        g_row = (g - np.sum(g * k_row, axis=-1, keepdims=True) * rows) / (rs * rows)
        g = np.where(mask, g_row, g)
    return g * k0 / temperature


def softmax_over_queries(p_hat):
    p = np.asarray(p_hat, dtype=float)
    z = p - p.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def softmax_over_queries_backward(y, dy):
    return y * (dy - np.sum(dy * y, axis=-2, keepdims=True))


def score_normalize(kind, p_hat, cfg: SinkhornConfig = SinkhornConfig()):
    kind = ParadigmKind.parse(kind)
    if kind is ParadigmKind.CS:
        return np.asarray(p_hat, dtype=float)
    if kind is ParadigmKind.SOFTMAX:
        return softmax_over_queries(p_hat)
    return sinkhorn_normalize(p_hat, cfg).matrix


def score_normalize_tape(kind, p_hat, cfg: SinkhornConfig):
    kind = ParadigmKind.parse(kind)
    if kind is ParadigmKind.CS:
        return p_hat, None
    if kind is ParadigmKind.SOFTMAX:
        y = softmax_over_queries(p_hat)
        return y, y
    return sinkhorn_forward_tape(p_hat, cfg)


def score_normalize_backward(kind, tape, d_scores):
    kind = ParadigmKind.parse(kind)
    if kind is ParadigmKind.CS:
        return d_scores
    if kind is ParadigmKind.SOFTMAX:
        return softmax_over_queries_backward(tape, d_scores)
    return sinkhorn_backward(tape, d_scores)


def paradigm_aggregate(kind, f_hat, p_hat, cfg: SinkhornConfig = SinkhornConfig()) -> np.ndarray:
    scores = score_normalize(kind, p_hat, cfg)
    return normalize_descriptor(cross_query_similarity(f_hat, scores))
