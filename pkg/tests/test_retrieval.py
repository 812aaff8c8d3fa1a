import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qaa.errors import CriterionError, DataError, DimensionError
from qaa.retrieval import (
    PlaceRecord,
    Position,
    PositiveCriterion,
    build_index,
    haversine,
    index_from_arrays,
    is_positive,
    load_index,
    recall_at_k,
    save_index,
    top_k,
    top_k_batch,
)

from .oracles import law_of_cosines_m, recall_enumerate, top_k_full_sort


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def random_index(seed, n=20, dim=8):
    m = unit_rows(np.random.default_rng(seed).normal(size=(n, dim)))
    return index_from_arrays(m, [f"r{i:02d}" for i in range(n)])


def test_haversine_examples():
    assert haversine(10.0, 20.0, 10.0, 20.0) == 0.0
    assert haversine(0, 0, 0, 180) == pytest.approx(math.pi * 6_371_000, abs=1e-6)
    assert round(haversine(0, 0, 0, 180)) == 20_015_087
    d = haversine(0, 0, 0, 0.001)
    assert d == pytest.approx(111.195, abs=1e-3)
    assert abs(d - law_of_cosines_m(0, 0, 0, 0.001)) / d < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.floats(-80, 80), st.floats(-170, 170), st.floats(-5, 5), st.floats(-5, 5))
def test_haversine_matches_law_of_cosines(lat, lon, dlat, dlon):
    d = haversine(lat, lon, lat + dlat, lon + dlon)
    if d > 1000:
        assert abs(d - law_of_cosines_m(lat, lon, lat + dlat, lon + dlon)) / d < 1e-6


def test_haversine_rejects_bad_coordinates():
    with pytest.raises(ValueError):
        haversine(91, 0, 0, 0)
    with pytest.raises(ValueError):
        Position.geo(0, 181)


def test_criterion_parse_and_validation():
    assert PositiveCriterion.parse("distance:25") == PositiveCriterion("distance_m", 25.0)
    assert PositiveCriterion.parse("frames:10").label() == "frames(10)"
    for bad in ("radius:3", "frames:", "distance:0"):
        with pytest.raises(CriterionError):
            PositiveCriterion.parse(bad)


def test_is_positive_kinds():
    c = PositiveCriterion("distance_m", 25.0)
    assert is_positive(Position.xy(0, 0), Position.xy(15, 20), c)
    assert not is_positive(Position.xy(0, 0), Position.xy(15, 20.1), c)
    assert is_positive(Position.geo(0, 0), Position.geo(0, 0.0002), c)
    assert is_positive(Position.frame(3), Position.frame(13), PositiveCriterion("frames", 10))
    with pytest.raises(CriterionError):
        is_positive(Position.xy(0, 0), Position.frame(0), c)
    with pytest.raises(CriterionError):
        is_positive(Position.frame(0), Position.frame(0), c)


def test_build_index_contract():
    recs = [PlaceRecord(f"a{i}", v, Position.xy(i, 0)) for i, v in enumerate(np.eye(3))]
    assert len(build_index(recs)) == 3
    with pytest.raises(DimensionError):
        build_index(recs + [PlaceRecord("x", np.array([1.0, 0.0]), Position.xy(0, 0))])
    with pytest.raises(DataError, match="'b'"):
        build_index([PlaceRecord("b", np.array([2.0, 0.0]), Position.xy(0, 0))])
    with pytest.raises(DataError):
        build_index([])


def test_self_match_ranked_first():
    idx = random_index(0)
    hits = top_k(idx.matrix[7], idx, 3).hits
    assert hits[0][0] == "r07" and abs(hits[0][1] - 1) < 1e-6


def test_full_k_is_permutation_and_truncation_flag():
    idx = random_index(1)
    res = top_k(idx.matrix[0], idx, 20)
    assert sorted(i for i, _ in res.hits) == sorted(idx.ids) and not res.truncated
    big = top_k(idx.matrix[0], idx, 25)
    assert len(big.hits) == 20 and big.truncated
    with pytest.raises(ValueError):
        top_k(idx.matrix[0], idx, 0)
    with pytest.raises(DimensionError):
        top_k(np.ones(3), idx, 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 20))
def test_top_k_matches_full_sort_oracle(seed, k):
    idx = random_index(seed)
    q = unit_rows(np.random.default_rng(seed + 1).normal(size=(1, 8)))[0]
    assert [i for i, _ in top_k(q, idx, k).hits] == top_k_full_sort(q, idx.matrix, idx.ids, k)


def test_ties_break_by_ascending_id():
    m = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    idx = index_from_arrays(m, ["b", "a", "c"])
    assert [i for i, _ in top_k(np.array([1.0, 0.0]), idx, 2).hits] == ["a", "b"]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_top_k_invariant_under_database_permutation(seed):
    idx = random_index(seed)
    perm = np.random.default_rng(seed).permutation(len(idx))
    shuffled = index_from_arrays(idx.matrix[perm], [idx.ids[i] for i in perm])
    q = idx.matrix[3] + 0.1
    assert top_k(q, idx, 6).hits == top_k(q, shuffled, 6).hits


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_inner_product_and_euclidean_rankings_agree(seed):
    idx = random_index(seed)
    q = unit_rows(np.random.default_rng(seed + 2).normal(size=(1, 8)))[0]
    by_ip = np.argsort(-(idx.matrix @ q), kind="stable")
    by_l2 = np.argsort(np.linalg.norm(idx.matrix - q, axis=1), kind="stable")
    np.testing.assert_array_equal(by_ip, by_l2)


def test_batch_equals_single():
    idx = random_index(2)
    qs = unit_rows(np.random.default_rng(3).normal(size=(4, 8)))
    rows = top_k_batch(qs, idx, 5)
    for q, r in zip(qs, rows):
        assert [idx.ids[i] for i in r] == [i for i, _ in top_k(q, idx, 5).hits]


def test_save_load_reproduces_top_k(tmp_path):
    idx = random_index(4, n=30)
    path = tmp_path / "db.cqsa"
    save_index(idx, path)
    loaded = load_index(path)
    assert loaded.ids == idx.ids
    qs = unit_rows(np.random.default_rng(5).normal(size=(10, 8)))
    for q in qs:
        assert [i for i, _ in top_k(q, loaded, 5).hits] == [i for i, _ in top_k(q, idx, 5).hits]


def test_recall_zero_distance_single_query():
    idx = index_from_arrays(np.eye(2), ["a", "b"])
    r = recall_at_k(np.eye(2)[:1], [Position.xy(0, 0)], idx, [Position.xy(0, 0), Position.xy(500, 0)], 1,
                    PositiveCriterion("distance_m", 25))
    assert r.recall == 1.0 and r.evaluated == 1 and r.excluded == 0


def test_recall_matches_enumeration_oracle():
    rng = np.random.default_rng(6)
    db = unit_rows(rng.normal(size=(10, 4)))
    qd = unit_rows(db[:6] + 0.6 * rng.normal(size=(6, 4)))
    db_pos = [Position.xy(40.0 * i, 0) for i in range(10)]
    q_pos = [Position.xy(40.0 * i + 10, 0) for i in range(6)]
    c = PositiveCriterion("distance_m", 25)
    idx = index_from_arrays(db, [f"d{i}" for i in range(10)])
    for k in (1, 2, 3, 5):
        expected = recall_enumerate(qd, q_pos, db, db_pos, k, lambda a, b: is_positive(a, b, c))
        assert recall_at_k(qd, q_pos, idx, db_pos, k, c).recall == pytest.approx(expected)


def test_recall_excludes_queries_without_positives():
    idx = index_from_arrays(np.eye(2), ["a", "b"])
    r = recall_at_k(np.eye(2), [Position.xy(0, 0), Position.xy(9000, 0)], idx,
                    [Position.xy(0, 0), Position.xy(100, 0)], 1, PositiveCriterion("distance_m", 25))
    assert r.evaluated == 1 and r.excluded == 1 and r.recall == 1.0


def test_recall_rejects_mixed_kinds():
    idx = index_from_arrays(np.eye(2), ["a", "b"])
    with pytest.raises(CriterionError):
        recall_at_k(np.eye(2)[:1], [Position.frame(0)], idx, [Position.xy(0, 0), Position.xy(1, 0)], 1,
                    PositiveCriterion("frames", 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_recall_monotone_in_k_and_frame_threshold(seed):
    rng = np.random.default_rng(seed)
    db = unit_rows(rng.normal(size=(15, 6)))
    qd = unit_rows(db + rng.normal(size=(15, 6)))
    idx = index_from_arrays(db, [f"f{i}" for i in range(15)])
    pos = [Position.frame(i) for i in range(15)]
    recalls = [recall_at_k(qd, pos, idx, pos, k, PositiveCriterion("frames", 1)).recall for k in range(1, 16)]
    assert all(a <= b for a, b in zip(recalls, recalls[1:]))
    loose = recall_at_k(qd, pos, idx, pos, 1, PositiveCriterion("frames", 10)).recall
    assert recalls[0] <= loose
