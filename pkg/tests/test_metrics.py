"""Tests for distances, ranks and Recall@1"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advranking import tensor as T
from advranking.metrics import (
    Metric,
    MetricError,
    RankingIndex,
    RankReport,
    attack_performance,
    distance,
    normalized_rank,
    rank_of,
    recall_at_1,
    row_distance,
)

LINE = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])


def brute_force_rank(embeddings, query, candidate, metric, exclude=()):
    """Count closer items one by one"""

    threshold = distance(query, candidate, metric)
    return sum(
        1 for position, item in enumerate(embeddings)
        if position not in exclude and distance(query, item, metric) < threshold
    )


def test_euclidean_and_cosine_distance():
    assert distance([0, 0], [3, 4], "euclidean") == pytest.approx(5.0)
    assert distance([1, 0], [0, 1], Metric.COSINE) == pytest.approx(1.0)
    assert distance([1, 0], [-1, 0], "cosine") == pytest.approx(2.0)
    assert distance([1, 1], [2, 2], "cosine") == pytest.approx(0.0)


def test_distance_rejects_undefined_inputs():
    """Zero vectors have no cosine, dimensions must agree"""

    with pytest.raises(MetricError):
        distance([0, 0], [1, 0], "cosine")
    with pytest.raises(MetricError):
        distance([0, 0], [1, 0, 0], "euclidean")
    with pytest.raises(MetricError):
        distance([1], [1], "manhattan")


def test_row_distance_matches_distance():
    a = np.array([[1.0, 2.0], [0.5, -1.0]])
    b = np.array([[2.0, 0.0], [1.0, 1.0]])

    for metric in Metric:
        got = row_distance(a, b, metric).data
        expected = [distance(x, y, metric) for x, y in zip(a, b)]
        np.testing.assert_allclose(got, expected, rtol=1e-5, atol=1e-6)


def test_cosine_row_distance_of_zero_vector_is_finite():
    out = row_distance(np.zeros((1, 3)), np.ones((1, 3)), "cosine")

    assert np.all(np.isfinite(out.data))


def test_row_distance_is_differentiable():
    a = T.Tensor([[1.0, 2.0]], requires_grad=True)
    with T.Tape() as tape:
        loss = row_distance(a, np.array([[4.0, 6.0]]), "euclidean").sum()
    tape.backward(loss)

    np.testing.assert_allclose(a.grad, [[-0.6, -0.8]], rtol=1e-6)


def test_rank_counts_strictly_closer_items():
    """Ties share the better rank"""

    index = RankingIndex(LINE, "euclidean")

    assert index.rank_of(np.array([0.0]), np.array([2.0])) == 2
    assert index.rank_of(np.array([2.0]), np.array([3.0])) == 1
    assert index.rank_of(np.array([2.0]), np.array([1.0])) == 1
    assert index.rank_of(np.array([0.0]), np.array([0.0])) == 0
    assert index.rank_of(np.array([0.0]), np.array([9.0])) == 5


def test_rank_excludes_listed_items():
    index = RankingIndex(LINE, "euclidean")

    assert index.rank_of(np.array([0.0]), np.array([2.5]), exclude=[0, 1]) == 1
    assert rank_of(index, np.array([0.0]), np.array([2.5]), exclude=[0, 0]) == 2


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.int64, (12, 3), elements=st.integers(-5, 5)),
    st.integers(0, 11),
    st.integers(0, 11),
)
def test_rank_matches_brute_force(embeddings, query, candidate):
    """Rank agrees with counting every corpus item, ties included"""

    embeddings = embeddings.astype(np.float64)
    index = RankingIndex(embeddings, "euclidean")
    exclude = (query, candidate)
    q, c = embeddings[query], embeddings[candidate]

    assert index.rank_of(q, c, exclude) == brute_force_rank(embeddings, q, c, "euclidean", exclude)


def test_cosine_rank_ignores_scale():
    """Scaled queries and candidates keep their cosine rank"""

    embeddings = np.array([[1.0, 0.0], [3.0, 0.1], [0.0, 1.0], [1.0, 1.0]])
    index = RankingIndex(embeddings, "cosine")

    assert index.rank_of(np.array([2.0, 0.0]), np.array([1.0, 0.5])) == 2
    assert index.rank_of(np.array([7.0, 0.0]), np.array([10.0, 5.0])) == 2
    assert index.rank_of(np.array([0.0, 5.0]), np.array([1.0, 0.2])) == 2


def test_nearest_keeps_corpus_order_on_ties():
    index = RankingIndex(np.array([[1.0], [0.0], [1.0], [-1.0]]), "euclidean")

    assert index.nearest(np.array([0.0]), 3).tolist() == [1, 0, 2]
    assert index.nearest(np.array([0.0]), 2, exclude=[1]).tolist() == [0, 2]
    with pytest.raises(MetricError):
        index.nearest(np.array([0.0]), 4, exclude=[1])


def test_index_validation():
    with pytest.raises(MetricError):
        RankingIndex(np.zeros((0, 3)))
    with pytest.raises(MetricError):
        RankingIndex(np.array([[np.nan, 0.0]]))
    with pytest.raises(MetricError):
        RankingIndex(np.ones((3, 2)), labels=[0, 1])
    with pytest.raises(MetricError):
        RankingIndex(np.ones((2, 2)), "cosine").distances(np.ones(3))


def test_index_is_read_only():
    index = RankingIndex(np.ones((2, 2)))

    with pytest.raises(ValueError):
        index.embeddings[0, 0] = 5.0


def test_normalized_rank_bounds():
    assert normalized_rank(0, 10) == 0.0
    assert normalized_rank(9, 10) == 0.9
    with pytest.raises(MetricError):
        normalized_rank(10, 10)
    with pytest.raises(MetricError):
        normalized_rank(0, 0)


def test_attack_performance_means_counterparts():
    """Each target averages over its counterparts, the report over targets"""

    report = attack_performance([[0.1, 0.3], [0.5, 0.5]])

    assert report.per_target_rank == pytest.approx((0.2, 0.5))
    assert report.mean_rank == pytest.approx(0.35)
    assert attack_performance([0.4, 0.2]).mean_rank == pytest.approx(0.3)
    with pytest.raises(MetricError):
        RankReport.from_ranks([])


def test_recall_at_1_skips_self_match():
    embeddings = np.array([[0.0], [0.1], [5.0], [5.2]])
    index = RankingIndex(embeddings, "euclidean", labels=[0, 0, 1, 0])

    recall = recall_at_1(index, embeddings, index.labels, query_ids=range(4))

    assert recall == pytest.approx(0.5)
    with pytest.raises(MetricError):
        recall_at_1(RankingIndex(embeddings), embeddings, [0, 0, 1, 0])


def test_recall_at_1_needs_a_neighbour_besides_self():
    index = RankingIndex(np.array([[0.3, 0.4]]), "euclidean", labels=[7])

    with pytest.raises(MetricError, match="no corpus neighbour"):
        recall_at_1(index, index.embeddings, index.labels, query_ids=[0])
    assert recall_at_1(index, index.embeddings, index.labels) == 1.0


def test_trained_model_retrieves_synthetic_clusters(corpus, test_set):
    """The synthetic fixture model separates its clusters"""

    recall = recall_at_1(corpus, corpus.embeddings, test_set.labels, query_ids=range(len(test_set)))

    assert recall >= 0.9
