"""End-to-end differentiable forward/backward through the aggregation head.

Training composes the attention kernels, the paradigm's score normalisation
and the descriptor normalisation here; there is no other gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregator import (
    InferenceCache,
    QaaParams,
    cache_queries,
    cross_query_similarity,
    normalize_descriptor,
    normalize_descriptor_backward,
    predict_query_features,
    predict_query_features_tape,
)
from .attn_kernels import mha_backward, mha_forward_tape
from .errors import DimensionError
from .paradigms import (
    ParadigmKind,
    SinkhornConfig,
    score_normalize,
    score_normalize_backward,
    score_normalize_tape,
)


@dataclass
class PipelineTape:
    params: QaaParams
    kind: ParadigmKind
    x: np.ndarray
    self_tape: object
    ref_tape: object
    pred_tape: object
    score_tape: object
    attended: np.ndarray
    p_hat: np.ndarray
    scores: np.ndarray
    f_hat: np.ndarray
    s: np.ndarray


def forward(params: QaaParams, x, kind=ParadigmKind.CS, sinkhorn: SinkhornConfig = SinkhornConfig()):
    """Descriptors ``(B, C_d)`` for stacked feature maps ``(B, P, C_o)`` plus a tape."""
    kind = ParadigmKind.parse(kind)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.config.c_o:
        raise DimensionError(f"feature maps have {x.shape[-1]} channels, model expects {params.config.c_o}")
    qf = params.q_f
    out_f, _, self_tape = mha_forward_tape(qf, qf, qf, params.feat_self_attn)
    q_f_hat = qf + out_f
    qr = params.q_r
    out_r, _, ref_tape = mha_forward_tape(qr, qr, qr, params.ref_self_attn)
    f_hat = qr + out_r
    p_hat, attended, _, pred_tape = predict_query_features_tape(q_f_hat, x, params)
    scores, score_tape = score_normalize_tape(kind, p_hat, sinkhorn)
    s = cross_query_similarity(f_hat, scores)
    desc = normalize_descriptor(s)
    tape = PipelineTape(params, kind, x, self_tape, ref_tape, pred_tape, score_tape,
                        attended, p_hat, scores, f_hat, s)
    return desc, tape


def backward(tape: PipelineTape, d_desc) -> dict:
    """Gradients keyed like :meth:`QaaParams.named_arrays`, plus ``"x"``."""
    p = tape.params
    c = p.config
    d_s = normalize_descriptor_backward(tape.s, d_desc)
    d_f_hat = (tape.scores @ np.swapaxes(d_s, -1, -2)).reshape(-1, c.n_q, c.c_r).sum(axis=0)
    d_scores = tape.f_hat @ d_s
    d_p_hat = score_normalize_backward(tape.kind, tape.score_tape, d_scores)

    grads = {
        "proj_w": tape.attended.reshape(-1, c.c_o).T @ d_p_hat.reshape(-1, c.c_f),
        "proj_b": d_p_hat.reshape(-1, c.c_f).sum(axis=0),
    }
    g_pred = mha_backward(tape.pred_tape, d_p_hat @ p.proj_w.T)
    d_q_f_hat = g_pred.d_q
    g_self = mha_backward(tape.self_tape, d_q_f_hat)
    g_ref = mha_backward(tape.ref_tape, d_f_hat)
    grads["q_f"] = d_q_f_hat + g_self.d_q + g_self.d_k + g_self.d_v
    grads["q_r"] = d_f_hat + g_ref.d_q + g_ref.d_k + g_ref.d_v
    for block, g in (("feat_self_attn", g_self), ("feat_pred_attn", g_pred), ("ref_self_attn", g_ref)):
        for n, a in g.param_grads().items():
            grads[f"{block}.{n}"] = a
    grads["x"] = g_pred.d_k + g_pred.d_v
    return grads


def encode(params: QaaParams, x, kind=ParadigmKind.CS, sinkhorn: SinkhornConfig = SinkhornConfig(),
           cache: InferenceCache | None = None, batch_size: int = 256) -> np.ndarray:
    """Inference-path descriptors using cached queries; ``x`` is ``(B, P, C_o)``."""
    if cache is None:
        cache = cache_queries(params)
    x = np.asarray(x, dtype=float)
    out = []
    for start in range(0, len(x), batch_size):
        p_hat = predict_query_features(cache.q_f_hat, x[start:start + batch_size], params)
        scores = score_normalize(kind, p_hat, sinkhorn)
        out.append(normalize_descriptor(cross_query_similarity(cache.f_hat, scores)))
    if not out:
        return np.zeros((0, params.config.c_d))
    return np.concatenate(out, axis=0)


def query_features(params: QaaParams, x, kind=ParadigmKind.CS, sinkhorn: SinkhornConfig = SinkhornConfig(),
                   cache: InferenceCache | None = None) -> np.ndarray:
    """Score-normalised query-level features ``(B, N_q, C_f)`` fed to the codebook product."""
    if cache is None:
        cache = cache_queries(params)
    p_hat = predict_query_features(cache.q_f_hat, np.asarray(x, dtype=float), params)
    return score_normalize(kind, p_hat, sinkhorn)
