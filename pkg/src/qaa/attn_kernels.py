"""Dense attention primitives with hand-written backward passes.

Arrays follow the ``x @ w + b`` convention: a weight of shape ``(in, out)``
maps row vectors. Every function accepts leading batch dimensions, and the
multi-head attention block broadcasts a shared query set against batched
keys/values, which is how the aggregation head attends its learned queries
over many feature maps at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, StateError


def linear(x, w, b):
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear: x{tuple(x.shape)} @ w{tuple(w.shape)} + b{tuple(b.shape)} is not defined"
        )
    return x @ w + b


def softmax_rows(x):
    """Softmax along the last axis, stabilised by subtracting the row maximum."""
    x = np.asarray(x, dtype=float)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y, dy):
    """Vector-Jacobian product of :func:`softmax_rows` given its output ``y``."""
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def largest_divisor_at_most(n: int, cap: int) -> int:
    for h in range(min(n, cap), 0, -1):
        if n % h == 0:
            return h
    return 1


@dataclass
class MhaParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for f in self.array_names():
            a = getattr(self, f)
            want = (d, d) if f.startswith("w_") else (d,)
            if a.shape != want:
                raise DimensionError(f"MhaParams.{f} has shape {a.shape}, expected {want}")
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"d_model={d} is not divisible by heads={self.heads}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @staticmethod
    def array_names():
        return ("w_q", "w_k", "w_v", "w_o", "b_q", "b_k", "b_v", "b_o")

    def arrays(self) -> dict:
        return {n: getattr(self, n) for n in self.array_names()}

    @classmethod
    def init(cls, d_model: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d_model % heads:
            raise ConfigError(f"d_model={d_model} is not divisible by heads={heads}")
        bound = 1.0 / np.sqrt(d_model)
        kw = {}
        for n in cls.array_names():
            if n.startswith("w_"):
                kw[n] = rng.uniform(-bound, bound, size=(d_model, d_model)).astype(dtype)
            else:
                # zero biases: uniform bias init adds a shared offset that collapses descriptors
                kw[n] = np.zeros(d_model, dtype=dtype)
        return cls(heads=heads, **kw)

    @classmethod
    def identity(cls, d_model: int, heads: int = 1):
        eye = np.eye(d_model)
        zero = np.zeros(d_model)
        return cls(eye.copy(), eye.copy(), eye.copy(), eye.copy(),
                   zero.copy(), zero.copy(), zero.copy(), zero.copy(), heads)


@dataclass
class MhaGrads:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    b_q: np.ndarray
    b_k: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray

    def param_grads(self) -> dict:
        return {n: getattr(self, n) for n in MhaParams.array_names()}


@dataclass
class MhaTape:
    """Intermediates saved by :func:`mha_forward_tape`; consumed once by backward."""

    params: MhaParams
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    attn: np.ndarray
    merged: np.ndarray
    out_shape: tuple
    used: bool = field(default=False)


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def _merge_heads(x):
    x = np.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_inputs(q, k, v, params):
    d = params.d_model
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(
            f"mha: q{q.shape}, k{k.shape}, v{v.shape} must all have {d} columns"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"mha: k has {k.shape[-2]} rows but v has {v.shape[-2]}")
    if d % params.heads:
        raise ConfigError(f"d_model={d} is not divisible by heads={params.heads}")


def mha_forward_tape(q, k, v, params: MhaParams):
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_inputs(q, k, v, params)
    h = params.heads
    dh = params.d_model // h
    qh = _split_heads(q @ params.w_q + params.b_q, h)
    kh = _split_heads(k @ params.w_k + params.b_k, h)
    vh = _split_heads(v @ params.w_v + params.b_v, h)
    scores = (qh @ np.swapaxes(kh, -1, -2)) / np.sqrt(dh)
    attn = softmax_rows(scores)
    merged = _merge_heads(attn @ vh)
    out = merged @ params.w_o + params.b_o
    tape = MhaTape(params, q, k, v, qh, kh, vh, attn, merged, out.shape)
    return out, attn, tape


def mha_forward(q, k, v, params: MhaParams):
    """Multi-head scaled dot-product attention.

    Returns ``(out, attn)`` where ``attn`` has shape ``(..., heads, Lq, Lk)``.
    """
    out, attn, _ = mha_forward_tape(q, k, v, params)
    return out, attn


def mha_backward(tape: MhaTape, d_out) -> MhaGrads:
    if tape.used:
        raise StateError("mha tape already consumed")
    d_out = np.asarray(d_out)
    if d_out.shape != tape.out_shape:
        raise StateError(f"d_out shape {d_out.shape} does not match forward output {tape.out_shape}")
    tape.used = True
    p = tape.params
    d = p.d_model
    dh = d // p.heads
    scale = 1.0 / np.sqrt(dh)

    flat_dout = d_out.reshape(-1, d)
    dw_o = tape.merged.reshape(-1, d).T @ flat_dout
    db_o = flat_dout.sum(axis=0)
    d_merged = d_out @ p.w_o.T
    d_heads = _split_heads(d_merged, p.heads)

    d_attn = d_heads @ np.swapaxes(tape.vh, -1, -2)
    d_vh = np.swapaxes(tape.attn, -1, -2) @ d_heads
    d_scores = softmax_rows_backward(tape.attn, d_attn) * scale
    d_qh = d_scores @ tape.kh
    d_kh = np.swapaxes(d_scores, -1, -2) @ tape.qh

    d_qp = _unbroadcast(_merge_heads(d_qh), tape.q.shape)
    d_kp = _unbroadcast(_merge_heads(d_kh), tape.k.shape)
    d_vp = _unbroadcast(_merge_heads(d_vh), tape.v.shape)

    def proj_grads(x, dx_p, w):
        return (x.reshape(-1, d).T @ dx_p.reshape(-1, d),
                dx_p.reshape(-1, d).sum(axis=0),
                dx_p @ w.T)

    dw_q, db_q, dq = proj_grads(tape.q, d_qp, p.w_q)
    dw_k, db_k, dk = proj_grads(tape.k, d_kp, p.w_k)
    dw_v, db_v, dv = proj_grads(tape.v, d_vp, p.w_v)
    return MhaGrads(dw_q, dw_k, dw_v, dw_o, db_q, db_k, db_v, db_o, dq, dk, dv)

