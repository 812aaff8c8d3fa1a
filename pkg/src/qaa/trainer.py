"""Multi-dataset metric-learning training of the aggregation head."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pipeline
from .aggregator import QaaConfig, QaaParams
from .errors import ConfigError, DataError, TrainingError
from .paradigms import ParadigmKind, SinkhornConfig
from .retrieval import PositiveCriterion, Position, index_from_arrays, recall_at_k
from .synth import DomainDataset, EvalSplit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatchPlan:
    n: int = 3
    k: int = 8
    m: int = 4

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.m < 2:
            raise ConfigError(f"batch plan needs n>=1, k>=1, m>=2, got {self}")

    @property
    def batch_size(self) -> int:
        return self.n * self.k * self.m


@dataclass
class Batch:
    patches: np.ndarray  # (N, P, C_o)
    labels: np.ndarray  # (N,) global place label
    dataset_idx: np.ndarray
    place_ids: np.ndarray


def compose_batch(datasets, plan: BatchPlan, rng: np.random.Generator) -> Batch:
    """Sample ``k`` places per dataset and ``m`` distinct images per place."""
    datasets = list(datasets)
    if len(datasets) != plan.n:
        raise DataError(f"batch plan expects {plan.n} datasets, got {len(datasets)}")
    patches, labels, didx, pids = [], [], [], []
    for di, ds in enumerate(datasets):
        if len(ds.place_ids) < plan.k:
            raise DataError(f"dataset {ds.name!r} has {len(ds.place_ids)} places, batch needs k={plan.k}")
        if ds.images_per_place < plan.m:
            raise DataError(f"dataset {ds.name!r} has {ds.images_per_place} images per place, batch needs m={plan.m}")
        chosen = rng.choice(ds.place_ids, size=plan.k, replace=False)
        for p in chosen:
            for j in rng.choice(ds.images_per_place, size=plan.m, replace=False):
                patches.append(ds.render(int(p), int(j), rng).patches)
                # labels are unique per (dataset, place)
                labels.append(di * 1_000_000 + int(p))
                didx.append(di)
                pids.append(int(p))
    return Batch(np.stack(patches), np.asarray(labels), np.asarray(didx), np.asarray(pids))


@dataclass(frozen=True)
class MsLossParams:
    alpha: float = 1.0
    beta: float = 50.0
    lam: float = 0.5
    gamma: float = 0.1

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise ConfigError("MS loss alpha, beta and gamma must be positive")
        if not 0 <= self.lam < 1:
            raise ConfigError("MS loss lambda must lie in [0, 1)")


def _log1p_sum_exp(z, mask):
    """``log(1 + sum(exp(z[mask])))`` per row and the softmax-style weights."""
    zm = np.where(mask, z, -np.inf)
    top = np.maximum(zm.max(axis=1, keepdims=True), 0.0)
    e = np.where(mask, np.exp(zm - top), 0.0)
    denom = np.exp(-top[:, 0]) + e.sum(axis=1)
    return top[:, 0] + np.log(denom), e / denom[:, None]


def ms_loss(descriptors, labels, params: MsLossParams = MsLossParams()):
    """Multi-Similarity loss on unit-norm descriptors; returns ``(loss, d_loss/d_desc)``.

    Pairs are mined per anchor: a positive is kept when ``S_ip - gamma`` is
    below the hardest negative, a negative when ``S_in + gamma`` exceeds the
    hardest positive. With an empty opposite set nothing is filtered.
    """
    e = np.asarray(descriptors, dtype=float)
    labels = np.asarray(labels)
    if len(labels) != len(e):
        raise ValueError(f"{len(labels)} labels for {len(e)} descriptors")
    if len(e) < 2:
        raise ValueError("MS loss needs at least two samples")
    n = len(e)
    s = e @ e.T
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same

    hardest_neg = np.where(neg, s, -np.inf).max(axis=1, keepdims=True)
    hardest_pos = np.where(pos, s, np.inf).min(axis=1, keepdims=True)
    has_pos = pos.any(axis=1, keepdims=True)
    has_neg = neg.any(axis=1, keepdims=True)
    keep_pos = pos & (~has_neg | (s - params.gamma < hardest_neg))
    keep_neg = neg & (~has_pos | (s + params.gamma > hardest_pos))

    lp, wp = _log1p_sum_exp(-params.alpha * (s - params.lam), keep_pos)
    ln, wn = _log1p_sum_exp(params.beta * (s - params.lam), keep_neg)
    loss = float(np.mean(lp / params.alpha + ln / params.beta))
    g = (wn - wp) / n  # d loss / d S
    return loss, (g + g.T) @ e


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 4e-5
    weight_decay: float = 1e-3
    warmup: int = 4000
    max_epochs: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("optimizer lr must be > 0")
        if self.warmup < 0:
            raise ConfigError("optimizer warmup must be >= 0")


DESK_OPTIMIZER = OptimizerConfig(lr=3e-3, weight_decay=1e-3, warmup=200, max_epochs=50)


def learning_rate(cfg: OptimizerConfig, iteration: int) -> float:
    if cfg.warmup == 0:
        return cfg.lr
    return cfg.lr * min(1.0, iteration / cfg.warmup)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: int = 0


def optimizer_step(params: dict, grads: dict, cfg: OptimizerConfig, state: AdamState, iteration: int) -> dict:
    """AdamW with decoupled weight decay; returns a new parameter dict."""
    for name, g in grads.items():
        if name in params and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    lr = learning_rate(cfg, iteration)
    state.steps += 1
    t = state.steps
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[name], state.v[name] = m, v
        decayed = p * (1 - lr * cfg.weight_decay)
        out[name] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return out


@dataclass
class TrainSettings:
    plan: BatchPlan = BatchPlan()
    model: QaaConfig = QaaConfig()
    paradigm: ParadigmKind = ParadigmKind.CS
    optimizer: OptimizerConfig = DESK_OPTIMIZER
    loss: MsLossParams = MsLossParams()
    sinkhorn: SinkhornConfig = SinkhornConfig()
    iters_per_epoch: int = 40
    patience: int = 10
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "plan": asdict(self.plan),
            "model": self.model.to_dict(),
            "paradigm": ParadigmKind.parse(self.paradigm).value,
            "optimizer": asdict(self.optimizer),
            "loss": asdict(self.loss),
            "sinkhorn": asdict(self.sinkhorn),
            "iters_per_epoch": self.iters_per_epoch,
            "patience": self.patience,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        known = {"plan", "model", "paradigm", "optimizer", "loss", "sinkhorn",
                 "iters_per_epoch", "patience", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training field(s): {', '.join(sorted(unknown))}")

        def sub(klass, key, base):
            raw = d.get(key, {})
            try:
                return klass(**{**asdict(base), **raw})
            except TypeError as exc:
                raise ConfigError(f"bad {key} config: {exc}") from None

        return cls(
            plan=sub(BatchPlan, "plan", BatchPlan()),
            model=QaaConfig.from_dict({**QaaConfig().to_dict(), **d.get("model", {})}),
            paradigm=ParadigmKind.parse(d.get("paradigm", "cs")),
            optimizer=sub(OptimizerConfig, "optimizer", DESK_OPTIMIZER),
            loss=sub(MsLossParams, "loss", MsLossParams()),
            sinkhorn=sub(SinkhornConfig, "sinkhorn", SinkhornConfig()),
            iters_per_epoch=int(d.get("iters_per_epoch", 40)),
            patience=int(d.get("patience", 10)),
            seed=int(d.get("seed", 0)),
        )


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    recall1: float


@dataclass
class TrainResult:
    params: QaaParams
    metrics: list
    best_epoch: int
    best_recall1: float
    settings: TrainSettings


def evaluate_split(params: QaaParams, split: EvalSplit, kind=ParadigmKind.CS,
                   sinkhorn: SinkhornConfig = SinkhornConfig(), k: int = 1,
                   criterion: PositiveCriterion = PositiveCriterion("distance_m", 25.0)) -> float:
    db = pipeline.encode(params, EvalSplit.stack(split.database), kind, sinkhorn)
    qs = pipeline.encode(params, EvalSplit.stack(split.queries), kind, sinkhorn)
    index = index_from_arrays(db, [o.obs_id for o in split.database])
    db_pos = [Position.xy(*o.position) for o in split.database]
    q_pos = [Position.xy(*o.position) for o in split.queries]
    return recall_at_k(qs, q_pos, index, db_pos, k, criterion).recall


def train(datasets, val_splits, settings: TrainSettings, init: QaaParams | None = None) -> TrainResult:
    """Train on ``datasets`` (one per domain); select by mean validation Recall@1.

    Deterministic for a fixed ``settings.seed``. The loss logged per epoch is
    the mean over that epoch's iterations. Epochs that end inside the warmup
    do not count towards ``patience``.
    """
    datasets = list(datasets)
    plan = settings.plan
    if plan.n != len(datasets):
        plan = BatchPlan(len(datasets), plan.k, plan.m)
    kind = ParadigmKind.parse(settings.paradigm)
    params = init.copy() if init is not None else QaaParams.init(settings.model, seed=settings.seed)
    rng = np.random.default_rng([settings.seed, 101])
    arrays = {k: v.copy() for k, v in params.named_arrays().items()}
    state = AdamState()

    def val_recall(p):
        if not val_splits:
            return float("nan")
        return float(np.mean([evaluate_split(p, s, kind, settings.sinkhorn) for s in val_splits]))

    best = params.copy()
    best_r1 = val_recall(params)
    best_epoch = 0
    metrics = []
    stale = 0
    iteration = 0
    for epoch in range(1, settings.optimizer.max_epochs + 1):
        losses = []
        for _ in range(settings.iters_per_epoch):
            batch = compose_batch(datasets, plan, rng)
            desc, tape = pipeline.forward(params, batch.patches, kind, settings.sinkhorn)
            loss, d_desc = ms_loss(desc, batch.labels, settings.loss)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", last_good=best)
            grads = pipeline.backward(tape, d_desc)
            arrays = optimizer_step(arrays, grads, settings.optimizer, state, iteration)
            params = QaaParams.from_arrays(settings.model, arrays)
            losses.append(loss)
            iteration += 1
        r1 = val_recall(params)
        metrics.append(EpochMetrics(epoch, float(np.mean(losses)), r1))
        log.info("epoch %d loss %.5f recall@1 %.4f", epoch, metrics[-1].loss, r1)
        if r1 > best_r1 or (math.isnan(best_r1) and not math.isnan(r1)):
            best, best_r1, best_epoch, stale = params.copy(), r1, epoch, 0
        elif iteration > settings.optimizer.warmup:
            # patience only runs once the learning rate has reached its target
            stale += 1
            if stale >= settings.patience:
                break
    return TrainResult(best, metrics, best_epoch, best_r1, settings)


def metrics_csv(metrics) -> str:
    lines = ["epoch,loss,recall1"]
    lines += [f"{m.epoch},{m.loss:.8f},{m.recall1:.6f}" for m in metrics]
    return "\n".join(lines) + "\n"
