"""End-to-end gradient check shared by the pipeline and acceptance tests."""

import numpy as np

from qaa import pipeline
from qaa.aggregator import QaaConfig, QaaParams
from qaa.paradigms import SinkhornConfig
from qaa.trainer import ms_loss

from .oracles import central_difference, relative_error

TINY = QaaConfig(n_q=4, c_o=8, c_f=3, c_r=5, heads=2)


def tiny_params(seed):
    p = QaaParams.init(TINY, seed)
    rng = np.random.default_rng(seed + 1)
    for name, a in p.named_arrays().items():
        if name.split(".")[-1].startswith("b_") or name == "proj_b":
            a[:] = rng.normal(scale=0.2, size=a.shape)
    return p


def full_gradcheck(kind, seed, sinkhorn=SinkhornConfig(), spread=3.0, step=1e-4):
    """Worst relative error per tensor; ``spread`` scales inputs and projection.

    At the default init all descriptors nearly coincide, the loss is flat to
    roundoff and no difference quotient resolves it, so instances are spread
    out until descriptors are distinguishable. Score-normalised paradigms
    squash P further and need a wider spread.
    """
    p = tiny_params(seed)
    p.proj_w[:] *= spread
    rng = np.random.default_rng(seed + 2)
    x = spread * rng.normal(size=(6, 7, 8))
    labels = np.array([0, 0, 1, 1, 2, 2])
    arrays = p.named_arrays()

    def f():
        d, _ = pipeline.forward(p, x, kind, sinkhorn)
        return ms_loss(d, labels)[0]

    desc, tape = pipeline.forward(p, x, kind, sinkhorn)
    _, d_desc = ms_loss(desc, labels)
    grads = pipeline.backward(tape, d_desc)
    numeric = {name: central_difference(f, a, step, order=4) for name, a in arrays.items()}
    numeric["x"] = central_difference(f, x, step, order=4)
    scale = max(float(np.max(np.abs(n))) for n in numeric.values())
    return {name: relative_error(grads[name], n, scale) for name, n in numeric.items()}
