"""Desk-scale experiment harness shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import pipeline
from .aggregator import QaaParams
from .coding_rate import CodingRateConfig, RateHistogram, rate_histogram
from .errors import ConfigError
from .paradigms import ParadigmKind
from .synth import DomainDataset, EvalSplit, SyntheticWorld, make_eval_split, split_places
from .trainer import TrainResult, TrainSettings, evaluate_split, train


@dataclass
class WorldSplits:
    world: SyntheticWorld
    train_places: list  # per domain
    val: list  # EvalSplit per domain
    images_per_place: int = 8


def prepare(world: SyntheticWorld, queries_per_place: int = 4, images_per_place: int = 8,
            val_fraction: float = 0.4) -> WorldSplits:
    train_places, val = [], []
    for d in range(len(world.domains)):
        tr, va = split_places(world, d, val_fraction)
        train_places.append(tr)
        val.append(make_eval_split(world, d, va, queries_per_place=queries_per_place))
    return WorldSplits(world, train_places, val, images_per_place)


def train_on(splits: WorldSplits, domains, settings: TrainSettings) -> TrainResult:
    """Train on the listed domains; model selection uses those domains' validation splits.

    The batch keeps ``n * k * m`` images whatever the number of domains: a
    single-domain run samples ``n * k`` places, so joint and single-domain
    models see the same number of images per step.
    """
    domains = [int(d) for d in domains]
    if not domains:
        raise ConfigError("at least one training domain is required")
    datasets = [DomainDataset(splits.world, d, splits.train_places[d], splits.images_per_place)
                for d in domains]
    places = settings.plan.n * settings.plan.k
    if places % len(domains):
        raise ConfigError(f"{places} places per batch do not split evenly over {len(domains)} domains")
    plan = replace(settings.plan, n=len(domains), k=places // len(domains))
    return train(datasets, [splits.val[d] for d in domains], replace(settings, plan=plan))


def per_domain_recall(params: QaaParams, splits: WorldSplits, settings: TrainSettings, k: int = 1) -> list:
    kind = ParadigmKind.parse(settings.paradigm)
    return [evaluate_split(params, s, kind, settings.sinkhorn, k=k) for s in splits.val]


def validation_features(params: QaaParams, splits: WorldSplits, settings: TrainSettings) -> np.ndarray:
    """Score-normalised query features of every validation query image, all domains."""
    kind = ParadigmKind.parse(settings.paradigm)
    x = np.concatenate([EvalSplit.stack(s.queries) for s in splits.val])
    return pipeline.query_features(params, x, kind, settings.sinkhorn)


def validation_rates(params: QaaParams, splits: WorldSplits, settings: TrainSettings,
                     cfg: CodingRateConfig = CodingRateConfig(), bins: int = 20) -> RateHistogram:
    label = ParadigmKind.parse(settings.paradigm).value
    return rate_histogram(validation_features(params, splits, settings), cfg, bins, label)
