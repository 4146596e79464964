import numpy as np
import pytest

from pqindex.errors import DegenerateInput, ParameterError
from pqindex.evaluate import (
    EvalRecord,
    coarse_utilization,
    evaluate_all,
    mean_distortion,
    precision_at_k,
    recall_at_k,
    skipped_records,
)
from pqindex.index import build
from pqindex.quantizer import QuantizerLayer


def records_fixture():
    return [
        EvalRecord("q0", {"a", "b", "c"}, ["a", "x", "b", "y", "z"]),
        EvalRecord("q1", {"m"}, ["x", "y", "m"]),
        EvalRecord("q2", set(), ["a", "b"]),
    ]


def test_precision_hand_values():
    recs = records_fixture()
    # q0: top-2 = {a,x}, 1 hit; q1: top-2 = {x,y}, 0; q2: 0 hits. mean(1/2, 0, 0)
    assert precision_at_k(recs, 2) == pytest.approx(1 / 6)
    # k=5 exceeds q1/q2's list length; denominator stays k
    # q0 finds a and b (c never retrieved): 2/5; q1 finds m: 1/5
    assert precision_at_k(recs, 5) == pytest.approx((2 / 5 + 1 / 5 + 0) / 3)


def test_recall_hand_values_and_empty_skip():
    recs = records_fixture()
    # q2 skipped. q0: 2 of 3 in top-3; q1: 1 of 1 in top-3
    assert recall_at_k(recs, 3) == pytest.approx((2 / 3 + 1) / 2)
    assert skipped_records(recs) == 1


def test_recall_all_empty_raises():
    recs = [EvalRecord("q", set(), ["a"])]
    with pytest.raises(ParameterError):
        recall_at_k(recs, 1)


def test_metric_validation():
    with pytest.raises(ParameterError):
        precision_at_k(records_fixture(), 0)
    with pytest.raises(ParameterError):
        precision_at_k([], 1)
    with pytest.raises(ParameterError):
        recall_at_k([], 1)


def test_evaluate_all_keys_and_values():
    recs = records_fixture()
    report = evaluate_all(recs, [2, 3])
    assert set(report) == {"n_records", "n_skipped_empty", "p@2", "r@2", "p@3", "r@3"}
    assert report["n_records"] == 3
    assert report["n_skipped_empty"] == 1
    assert report["p@2"] == pytest.approx(precision_at_k(recs, 2))
    assert report["r@3"] == pytest.approx(recall_at_k(recs, 3))


def test_perfect_retrieval_scores_one():
    recs = [EvalRecord("q", {"a", "b"}, ["a", "b"])]
    assert precision_at_k(recs, 2) == 1.0
    assert recall_at_k(recs, 2) == 1.0


def test_mean_distortion_matches_direct_computation():
    rng = np.random.default_rng(0)
    layer = QuantizerLayer(
        rng.normal(size=(4, 8)).astype(np.float32),
        (rng.normal(size=(2, 4, 4)) * 0.4).astype(np.float32),
        rotation_enabled=False,
    )
    emb = rng.normal(size=(50, 8)).astype(np.float32)
    want = 0.0
    for row in emb:
        q = layer.full_quantize(row)[0]
        diff = q - row.astype(np.float64)
        want += float(diff @ diff)
    want /= emb.shape[0]
    assert mean_distortion(layer, emb) == pytest.approx(want, rel=1e-12)
    # chunking must not change the answer
    assert mean_distortion(layer, emb, chunk=7) == pytest.approx(want, rel=1e-12)


def test_mean_distortion_validation():
    rng = np.random.default_rng(1)
    layer = QuantizerLayer(
        rng.normal(size=(2, 4)).astype(np.float32),
        (rng.normal(size=(2, 2, 2)) * 0.4).astype(np.float32),
    )
    with pytest.raises(DegenerateInput):
        mean_distortion(layer, np.empty((0, 4), dtype=np.float32))
    with pytest.raises(DegenerateInput):
        mean_distortion(layer, np.ones(4, dtype=np.float32))


def test_coarse_utilization_counts_nonempty_lists():
    rng = np.random.default_rng(2)
    coarse = np.zeros((4, 4), dtype=np.float32)
    coarse[0] = (1, 1, 1, 1)
    coarse[1] = (-1, -1, -1, -1)
    coarse[2] = (100, 100, 100, 100)  # never nearest for unit-ish data
    coarse[3] = (-100, -100, -100, -100)
    layer = QuantizerLayer(
        coarse,
        (rng.normal(size=(2, 2, 2)) * 0.1).astype(np.float32),
        rotation_enabled=False,
    )
    emb = np.sign(rng.normal(size=(40, 1))).astype(np.float32) * np.ones(
        (40, 4), dtype=np.float32
    )
    index = build(emb, [f"i{i}" for i in range(40)], layer)
    used, total = coarse_utilization(index)
    assert total == 4
    assert used == 2
