"""Analytic FLOP and parameter counts for the aggregation head.

Convention: a multiply-add is 2 FLOPs, a bias add or elementwise scale is 1
per element, softmax is 4 per element (max, subtract, exp, divide), and a
square root counts 1. Stages that depend only on parameters are marked
``cached`` and kept out of the per-image inference total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .aggregator import ImageSpec, QaaConfig

CONVENTION = "2 FLOPs per multiply-add; softmax 4 FLOPs/element; bias add 1 FLOP/element"


@dataclass(frozen=True)
class Stage:
    name: str
    flops: int
    cached: bool = False


@dataclass
class FlopProfile:
    config: QaaConfig
    image: ImageSpec
    stages: list = field(default_factory=list)
    params: int = 0
    convention: str = CONVENTION

    @property
    def inference_flops(self) -> int:
        return sum(s.flops for s in self.stages if not s.cached)

    @property
    def cached_flops(self) -> int:
        return sum(s.flops for s in self.stages if s.cached)

    @property
    def total_flops(self) -> int:
        return self.inference_flops + self.cached_flops

    @property
    def gflops(self) -> float:
        return self.inference_flops / 1e9


def _linear(rows, d_in, d_out):
    return 2 * rows * d_in * d_out + rows * d_out


def _mha(lq, lk, d, heads, prefix, cached=False, q_cached=False):
    """Stages of one attention block with ``lq`` queries over ``lk`` keys at width ``d``."""
    dh = d // heads
    return [
        Stage(f"{prefix}.q_proj", _linear(lq, d, d), cached or q_cached),
        Stage(f"{prefix}.kv_proj", 2 * _linear(lk, d, d), cached),
        Stage(f"{prefix}.scores", heads * (2 * lq * lk * dh + lq * lk), cached),
        Stage(f"{prefix}.softmax", 4 * heads * lq * lk, cached),
        Stage(f"{prefix}.weighted_sum", heads * 2 * lq * lk * dh, cached),
        Stage(f"{prefix}.out_proj", _linear(lq, d, d), cached),
    ]


def _mha_params(d):
    return 4 * d * d + 4 * d


def count_flops(config: QaaConfig, img: ImageSpec = ImageSpec()) -> FlopProfile:
    c = config
    p = img.num_patches
    h_o = c.heads_for(c.c_o)
    h_r = c.heads_for(c.c_r)
    stages = []
    stages += _mha(c.n_q, c.n_q, c.c_o, h_o, "feat_self_attn", cached=True)
    stages.append(Stage("feat_self_attn.residual", c.n_q * c.c_o, True))
    stages += _mha(c.n_q, c.n_q, c.c_r, h_r, "ref_self_attn", cached=True)
    stages.append(Stage("ref_self_attn.residual", c.n_q * c.c_r, True))
    stages += _mha(c.n_q, p, c.c_o, h_o, "feat_pred_attn")
    stages.append(Stage("proj", _linear(c.n_q, c.c_o, c.c_f)))
    stages.append(Stage("similarity", 2 * c.n_q * c.c_r * c.c_f))
    # squares and sums for column norms, divides, then the same for the global norm
    stages.append(Stage("normalize", 3 * c.c_d + c.c_f + 3 * c.c_d + 1))
    params = (c.n_q * c.c_o + c.n_q * c.c_r + 2 * _mha_params(c.c_o) + _mha_params(c.c_r)
              + c.c_o * c.c_f + c.c_f)
    return FlopProfile(c, img, stages, params)


def profile_csv(profiles) -> str:
    lines = ["n_q,c_f,c_r,c_o,height,width,inference_gflops,cached_gflops,params"]
    for pr in profiles:
        c = pr.config
        lines.append(f"{c.n_q},{c.c_f},{c.c_r},{c.c_o},{pr.image.height},{pr.image.width},"
                     f"{pr.gflops:.6f},{pr.cached_flops / 1e9:.6f},{pr.params}")
    return "\n".join(lines) + "\n"
