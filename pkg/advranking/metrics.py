"""Distances, ranks and retrieval quality.

Every other module reports through this one: attacks compare ranks
before and after perturbation, training reports Recall@1 and the harness
aggregates :class:`RankReport` values into tables.

Ranks are 0-indexed and strict: a candidate's rank is the number of corpus
items strictly closer to the query, so tied items share the better rank.
"""

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from . import AdvrankingError
from . import tensor as T

_log = logging.getLogger(__name__)

#: Floor applied to embedding norms inside differentiable cosine distances
NORM_FLOOR = 1e-12


class MetricError(AdvrankingError, ValueError):
    """Distance or rank is undefined for the given arguments."""


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"

    @classmethod
    def coerce(cls, value) -> "Metric":
        try:
            return cls(value)
        except ValueError as err:
            raise MetricError("Unknown distance metric: {!r}".format(value)) from err


def distance(a: np.ndarray, b: np.ndarray, metric) -> float:
    """Distance between two embeddings.

    Arguments:
        a, b: Embedding vectors of equal dimension.
        metric: ``euclidean`` for the l2 distance, ``cosine`` for
            one minus the cosine similarity (range [0, 2]).

    Raises:
        MetricError: Dimensions differ, or a cosine operand is the zero vector.
    """

    metric = Metric.coerce(metric)
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise MetricError("Embedding dimensions differ: {} vs {}".format(a.shape, b.shape))

    if metric is Metric.EUCLIDEAN:
        return float(np.linalg.norm(a - b))

    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("Cosine distance is undefined for a zero vector")
    return float(max(0.0, 1.0 - np.dot(a, b) / (na * nb)))


def row_distance(a: T.TensorLike, b: T.TensorLike, metric) -> T.Tensor:
    """Differentiable distance over the last axis, broadcasting the others.

    The cosine form floors the norms at :data:`NORM_FLOOR` so that a zero
    embedding yields a finite value instead of a division by zero.
    """

    metric = Metric.coerce(metric)
    a, b = T.as_tensor(a), T.as_tensor(b)
    if metric is Metric.EUCLIDEAN:
        return T.l2_norm_rows(T.sub(a, b))

    norms = T.mul(
        T.clamp(T.l2_norm_rows(a), lo=NORM_FLOOR),
        T.clamp(T.l2_norm_rows(b), lo=NORM_FLOOR),
    )
    return T.sub(1.0, T.div(T.dot_rows(a, b), norms))


def _distances_to(embeddings: np.ndarray, query: np.ndarray, metric: Metric) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != embeddings.shape[1]:
        raise MetricError(
            "Query dimension {} does not match corpus dimension {}".format(
                query.shape[0], embeddings.shape[1]
            )
        )

    if metric is Metric.EUCLIDEAN:
        return np.linalg.norm(embeddings - query, axis=1)

    norms = np.linalg.norm(embeddings, axis=1)
    qnorm = np.linalg.norm(query)
    if qnorm == 0 or np.any(norms == 0):
        raise MetricError("Cosine distance is undefined for a zero vector")
    return np.clip(1.0 - embeddings @ query / (norms * qnorm), 0.0, 2.0)


@dataclass(frozen=True)
class RankingIndex:
    """The candidate corpus X with precomputed embeddings.

    Attributes:
        embeddings: ``|X| x embed_dim`` corpus embeddings (kept in 64 bits).
        metric: Distance used for every rank query.
        labels: Optional class id per corpus item.
        images: Optional corpus images, needed to attack corpus members.
    """

    embeddings: np.ndarray
    metric: Metric = Metric.COSINE
    labels: Optional[np.ndarray] = None
    images: Optional[np.ndarray] = None

    def __post_init__(self):
        embeddings = np.array(self.embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[0] == 0:
            raise MetricError(
                "Ranking corpus must be a non-empty matrix, got shape {}".format(
                    embeddings.shape
                )
            )
        if not np.all(np.isfinite(embeddings)):
            raise MetricError("Ranking corpus contains non-finite embeddings")
        embeddings.setflags(write=False)
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "metric", Metric.coerce(self.metric))

        if self.labels is not None:
            labels = np.array(self.labels)
            if labels.shape != (embeddings.shape[0],):
                raise MetricError("Expected one label per corpus item")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

        if self.images is not None:
            images = np.array(self.images, dtype=T.DTYPE)
            if images.shape[0] != embeddings.shape[0]:
                raise MetricError("Expected one image per corpus item")
            images.setflags(write=False)
            object.__setattr__(self, "images", images)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    def __len__(self):
        return self.size

    def distances(self, query: np.ndarray) -> np.ndarray:
        """Distance from ``query`` to every corpus item, in corpus order."""

        return _distances_to(self.embeddings, query, self.metric)

    def distances_between(self, query: np.ndarray, others: np.ndarray) -> np.ndarray:
        """Distance from ``query`` to each row of ``others``, computed like :meth:`distances`."""

        return _distances_to(np.atleast_2d(np.asarray(others, dtype=np.float64)), query, self.metric)

    def rank_of(self, query: np.ndarray, candidate: np.ndarray, exclude: Iterable[int] = ()) -> int:
        """Number of corpus items strictly closer to ``query`` than ``candidate``.

        Corpus items listed in ``exclude`` do not take part in the count.
        """

        threshold = self.distances_between(query, candidate)[0]
        return self.rank_at(self.distances(query), threshold, exclude)

    def rank_at(self, distances: np.ndarray, threshold: float, exclude: Iterable[int] = ()) -> int:
        """Rank of a candidate at ``threshold`` given precomputed distances."""

        closer = distances < threshold
        excluded = np.unique(np.asarray(list(exclude), dtype=np.intp))
        if excluded.size:
            closer[excluded] = False
        return int(np.count_nonzero(closer))

    def nearest(self, query: np.ndarray, k: int, exclude: Iterable[int] = ()) -> np.ndarray:
        """Indices of the ``k`` nearest corpus items; ties keep corpus order."""

        dist = self.distances(query)
        excluded = np.unique(np.asarray(list(exclude), dtype=np.intp))
        if excluded.size:
            dist = dist.copy()
            dist[excluded] = np.inf
        available = self.size - excluded.size
        if k > available:
            raise MetricError(
                "Requested {} neighbours but only {} corpus items are eligible".format(
                    k, available
                )
            )
        return np.argsort(dist, kind="stable")[:k]


def rank_of(index: RankingIndex, q: np.ndarray, c: np.ndarray, exclude: Iterable[int] = ()) -> int:
    """0-indexed rank of candidate ``c`` for query ``q`` over ``index``."""

    return index.rank_of(q, c, exclude)


def normalized_rank(rank: int, corpus_size: int) -> float:
    """Rank as a fraction of the corpus size."""

    if corpus_size <= 0:
        raise MetricError("Corpus size must be positive, got {}".format(corpus_size))
    if not 0 <= rank < corpus_size:
        raise MetricError("Rank {} outside corpus of size {}".format(rank, corpus_size))
    return rank / corpus_size


@dataclass(frozen=True)
class RankReport:
    """Normalized ranks of one or more attacked targets.

    ``mean_rank`` is always the arithmetic mean of ``per_target_rank``.
    """

    per_target_rank: Tuple[float, ...]
    mean_rank: float
    sp_mean_rank: Optional[float] = None

    @classmethod
    def from_ranks(cls, per_target_rank: Sequence[float], sp_mean_rank: Optional[float] = None) -> "RankReport":
        values = tuple(float(value) for value in per_target_rank)
        if not values:
            raise MetricError("A rank report needs at least one target")
        return cls(values, float(np.mean(values)), sp_mean_rank)


def attack_performance(ranks) -> RankReport:
    """Aggregate a ``targets x counterparts`` matrix of normalized ranks.

    Each target's rank is the mean over its counterparts (its queries for a
    candidate attack, its candidates for a query attack).
    """

    matrix = np.asarray(ranks, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[np.newaxis, :]
    if matrix.ndim != 2 or matrix.size == 0:
        raise MetricError("Rank matrix must be a non-empty 2-D array")
    return RankReport.from_ranks(matrix.mean(axis=1))


def recall_at_1(
    index: RankingIndex,
    queries: np.ndarray,
    query_labels: Optional[np.ndarray] = None,
    query_ids: Optional[Sequence[int]] = None,
) -> float:
    """Fraction of queries whose nearest neighbour shares their label.

    Arguments:
        index: Corpus to search; must carry labels.
        queries: ``n x embed_dim`` query embeddings.
        query_labels: Label of each query.
        query_ids: Corpus position of each query, excluded from its own
            search (self-match). ``None`` when queries are not corpus members.

    Returns:
        Recall@1 in [0, 1]. Among equally near neighbours the first in
        corpus order wins.

    Raises:
        MetricError: Labels are missing on either side, or a corpus
            query has no neighbour but itself.
    """

    if index.labels is None or query_labels is None:
        raise MetricError("Recall@1 needs labels for both corpus and queries")

    queries = np.asarray(queries, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    if queries.shape[0] != query_labels.shape[0]:
        raise MetricError("Expected one label per query")

    hits = 0
    for position, (query, label) in enumerate(zip(queries, query_labels)):
        dist = index.distances(query)
        if query_ids is not None:
            dist = dist.copy()
            dist[query_ids[position]] = np.inf
            if not np.isfinite(dist).any():
                raise MetricError(
                    "Query {} has no corpus neighbour besides itself".format(query_ids[position])
                )
        hits += int(index.labels[int(np.argmin(dist))] == label)

    recall = hits / max(len(query_labels), 1)
    _log.debug("Recall@1 over %d queries: %.4f", len(query_labels), recall)
    return recall
