import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qaa import trainer
from qaa.aggregator import QaaConfig, QaaParams
from qaa.errors import ConfigError, DataError, TrainingError
from qaa.synth import DomainDataset, generate_world, make_eval_split, split_places
from qaa.trainer import (
    AdamState,
    BatchPlan,
    MsLossParams,
    OptimizerConfig,
    TrainSettings,
    compose_batch,
    learning_rate,
    metrics_csv,
    ms_loss,
    optimizer_step,
    train,
)

from .oracles import central_difference, relative_error


@pytest.fixture(scope="module")
def world():
    return generate_world(num_places=150)


def datasets(world, n=3):
    return [DomainDataset(world, d, split_places(world, d)[0]) for d in range(n)]


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def test_batch_of_full_size(world):
    b = compose_batch(datasets(world), BatchPlan(3, 30, 4), np.random.default_rng(0))
    assert b.patches.shape == (360, 49, 64)
    assert len(set(b.labels)) == 90


def test_minimal_batch():
    w = generate_world(num_places=6)
    b = compose_batch(datasets(w, 1), BatchPlan(1, 1, 2), np.random.default_rng(0))
    assert len(b.labels) == 2 and b.labels[0] == b.labels[1]


def test_batch_places_distinct_and_positive_pair_count(world):
    plan = BatchPlan(3, 8, 4)
    b = compose_batch(datasets(world), plan, np.random.default_rng(1))
    for d in range(3):
        lab = b.labels[b.dataset_idx == d]
        assert len(set(b.place_ids[b.dataset_idx == d])) == plan.k
        same = lab[:, None] == lab[None, :]
        assert (same.sum() - len(lab)) // 2 == plan.k * plan.m * (plan.m - 1) // 2


def test_batch_errors_name_dataset(world):
    ds = datasets(world, 1)
    with pytest.raises(DataError, match="multiview_sparse"):
        compose_batch(ds, BatchPlan(1, 500, 2), np.random.default_rng(0))
    with pytest.raises(DataError, match="multiview_sparse"):
        compose_batch(ds, BatchPlan(1, 2, 9), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        BatchPlan(1, 1, 1)


def test_ms_loss_orthogonal_pair():
    loss, _ = ms_loss(np.eye(2), [0, 1])
    assert loss == pytest.approx(math.log(1 + math.exp(50 * (0 - 0.5))) / 50, rel=1e-12)


def test_ms_loss_anchor_without_mined_pairs_contributes_zero():
    e = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    loss, _ = ms_loss(e, [0, 0, 1])
    # only the third anchor (no positives, so both negatives kept) contributes
    assert loss == pytest.approx(math.log(1 + 2 * math.exp(-25)) / 50 / 3, rel=1e-12)


def test_ms_loss_errors():
    with pytest.raises(ValueError):
        ms_loss(np.eye(3), [0, 1])
    with pytest.raises(ValueError):
        ms_loss(np.eye(1), [0])
    with pytest.raises(ConfigError):
        MsLossParams(lam=1.0)


def mining_margin(e, labels, gamma=0.1):
    """Distance of the closest pair to a mining threshold; the loss jumps there."""
    s = e @ e.T
    same = labels[:, None] == labels[None, :]
    pos, neg = same & ~np.eye(len(e), dtype=bool), ~same
    hn = np.where(neg, s, -np.inf).max(axis=1, keepdims=True)
    hp = np.where(pos, s, np.inf).min(axis=1, keepdims=True)
    return min(np.abs(np.where(pos, s - gamma - hn, np.inf)).min(),
               np.abs(np.where(neg, s + gamma - hp, np.inf)).min())


def smooth_instance(rng, labels, margin=1e-2):
    while True:
        e = unit_rows(rng.normal(size=(len(labels), 4)))
        if mining_margin(e, labels) > margin:
            return e


@pytest.mark.parametrize("seed", range(3))
def test_ms_loss_gradient_finite_differences(seed):
    labels = np.array([0, 0, 0, 1, 1, 1])
    e = smooth_instance(np.random.default_rng(seed), labels)
    p = MsLossParams(beta=10.0)
    _, g = ms_loss(e, labels, p)
    num = central_difference(lambda: ms_loss(e, labels, p)[0], e, 1e-4, order=4)
    assert relative_error(g, num) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ms_loss_permutation_invariant_and_nonnegative(seed):
    rng = np.random.default_rng(seed)
    e = unit_rows(rng.normal(size=(8, 5)))
    labels = rng.integers(0, 3, size=8)
    perm = rng.permutation(8)
    loss, g = ms_loss(e, labels)
    loss_p, g_p = ms_loss(e[perm], labels[perm])
    assert loss >= 0
    assert loss_p == pytest.approx(loss, abs=1e-12)
    np.testing.assert_allclose(g_p, g[perm], atol=1e-12)


def test_warmup_endpoints():
    cfg = OptimizerConfig(lr=1e-3, warmup=200)
    assert learning_rate(cfg, 0) == 0.0
    assert learning_rate(cfg, 100) == pytest.approx(5e-4)
    assert learning_rate(cfg, 200) == 1e-3
    assert learning_rate(cfg, 5000) == 1e-3
    assert learning_rate(OptimizerConfig(lr=2e-3, warmup=0), 0) == 2e-3


def test_zero_gradient_without_decay_is_fixed_point():
    p = {"w": np.array([1.5, -2.0])}
    out = optimizer_step(p, {"w": np.zeros(2)}, OptimizerConfig(lr=0.1, weight_decay=0.0, warmup=0), AdamState(), 0)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_decay_is_decoupled_from_gradient():
    p = {"w": np.array([2.0])}
    cfg = OptimizerConfig(lr=0.1, weight_decay=0.5, warmup=0)
    out = optimizer_step(p, {"w": np.zeros(1)}, cfg, AdamState(), 0)
    np.testing.assert_allclose(out["w"], [2.0 * (1 - 0.1 * 0.5)])


def test_quadratic_converges():
    cfg = OptimizerConfig(lr=0.05, weight_decay=0.0, warmup=0)
    state, p = AdamState(), {"x": np.array([0.0])}
    for i in range(500):
        p = optimizer_step(p, {"x": 2 * (p["x"] - 3.0)}, cfg, state, i)
    assert abs(p["x"][0] - 3.0) < 1e-3


def test_non_finite_gradient_names_tensor():
    with pytest.raises(TrainingError, match="proj_w"):
        optimizer_step({"proj_w": np.zeros(2)}, {"proj_w": np.array([np.nan, 0.0])},
                       OptimizerConfig(), AdamState(), 0)


def test_settings_round_trip_and_unknown_keys():
    s = TrainSettings(plan=BatchPlan(2, 4, 3), model=QaaConfig(n_q=8), seed=5, patience=3)
    assert TrainSettings.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigError):
        TrainSettings.from_dict({"nope": 1})


def small_run(world, epochs, seed=0, patience=100, warmup=20):
    splits = [split_places(world, d) for d in range(3)]
    ds = [DomainDataset(world, d, splits[d][0]) for d in range(3)]
    vals = [make_eval_split(world, d, splits[d][1]) for d in range(3)]
    s = TrainSettings(plan=BatchPlan(3, 6, 4), model=QaaConfig(n_q=8, c_o=64, c_f=8, c_r=8),
                      optimizer=OptimizerConfig(lr=3e-3, weight_decay=1e-3, warmup=warmup, max_epochs=epochs),
                      iters_per_epoch=8, patience=patience, seed=seed)
    return train(ds, vals, s)


@pytest.fixture(scope="module")
def ten_epochs(world):
    return small_run(world, 10)


def test_loss_trend_over_first_ten_epochs(ten_epochs):
    losses = np.array([m.loss for m in ten_epochs.metrics])
    assert len(losses) == 10
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert np.all(np.diff(smooth) < 0)


def test_training_deterministic(world, ten_epochs):
    again = small_run(world, 10)
    assert metrics_csv(again.metrics) == metrics_csv(ten_epochs.metrics)
    for k, v in again.params.named_arrays().items():
        np.testing.assert_array_equal(v, ten_epochs.params.named_arrays()[k])


def test_metrics_csv_format(ten_epochs):
    lines = metrics_csv(ten_epochs.metrics).splitlines()
    assert lines[0] == "epoch,loss,recall1"
    assert len(lines) == 11 and lines[1].startswith("1,")


def test_early_stop_on_plateau(world):
    r = small_run(world, 30, patience=1)
    assert len(r.metrics) < 30 or r.best_epoch == 30


def test_warmup_epochs_do_not_exhaust_patience(world):
    r = small_run(world, 5, patience=1, warmup=1000)
    assert len(r.metrics) == 5


def test_divergence_returns_last_good(world, monkeypatch):
    monkeypatch.setattr(trainer, "ms_loss", lambda d, l, p: (float("nan"), np.zeros_like(d)))
    with pytest.raises(TrainingError) as info:
        small_run(world, 2)
    assert isinstance(info.value.last_good, QaaParams)
