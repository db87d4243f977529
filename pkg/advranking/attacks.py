"""Adversarial ranking attacks.

All attacks run projected gradient descent with signed steps inside the
feasible set: the l-infinity ball of radius epsilon around the original
image, intersected with the pixel box [0, 1]^N. PGD never starts at a
random point and always runs its full number of iterations.

Candidate attacks (CA+/CA-) perturb a candidate to raise or lower its rank
for a set of queries Q; query attacks (QA+/QA-) perturb a query to raise or
lower the ranks of candidates C, optionally with a semantics-preserving
term pinning the query's original top-G neighbours. Universal variants
share one perturbation across many targets. The max-shift attack pushes an
embedding as far as possible from where it started and drives the defense.

Attack hinges use margin 0. The inner sum over the corpus is evaluated on a
fixed random subsample (the *pool*) chosen once per attack; reported ranks
always use the full corpus.
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import AdvrankingError
from . import tensor as T
from .metrics import (
    Metric,
    MetricError,
    RankingIndex,
    RankReport,
    attack_performance,
    distance,
    row_distance,
)
from .ranker import EmbeddingModel, embed, embed_array

_log = logging.getLogger(__name__)

#: Default size of the random corpus subsample used inside attack losses
DEFAULT_POOL_SIZE = 256
#: Default number of semantics-preserving neighbours
DEFAULT_SP_GROUP = 5
#: Amplitude of the reference offset used on the first max-shift iteration
SHIFT_JITTER = 1e-4
#: Feasibility tolerance of the per-iteration check
FEASIBILITY_TOLERANCE = 1e-6


class AttackError(AdvrankingError):
    """An attack cannot be set up or its optimization failed."""


class AttackKind(str, enum.Enum):
    CA_PLUS = "CA+"
    CA_MINUS = "CA-"
    QA_PLUS = "QA+"
    QA_MINUS = "QA-"
    I_CA_PLUS = "I-CA+"
    I_CA_MINUS = "I-CA-"
    I_QA_PLUS = "I-QA+"
    I_QA_MINUS = "I-QA-"
    MAX_SHIFT = "MaxShift"
    DIST_CA_PLUS = "DistAlt-CA+"
    DIST_QA_MINUS = "DistAlt-QA-"

    @property
    def base(self) -> "AttackKind":
        """The per-image hinge attack this kind derives from."""

        if self.is_universal:
            return AttackKind(self.value[2:])
        if self.is_distance:
            return AttackKind(self.value[len("DistAlt-"):])
        return self

    @property
    def is_universal(self) -> bool:
        return self.value.startswith("I-")

    @property
    def is_distance(self) -> bool:
        return self.value.startswith("DistAlt-")

    @property
    def is_candidate(self) -> bool:
        return self.base in (AttackKind.CA_PLUS, AttackKind.CA_MINUS)

    @property
    def is_query(self) -> bool:
        return self.base in (AttackKind.QA_PLUS, AttackKind.QA_MINUS)

    @property
    def raises(self) -> bool:
        """True for "+" kinds, which move the targets toward the top."""

        return self.value.endswith("+")


#: Default semantics-preserving weight of each query attack
DEFAULT_XI = {AttackKind.QA_PLUS: 1.0, AttackKind.QA_MINUS: 100.0}


@dataclass(frozen=True)
class PerturbationBudget:
    """Strength of an attack: radius, PGD step and iteration count.

    Missing ``alpha`` and ``eta`` follow the epsilon-driven defaults
    ``alpha = min(max(eps / 10, 1 / 255), 0.01)`` and
    ``eta = ceil(min(max(10, 2 eps / alpha), 30))``.
    """

    epsilon: float
    alpha: Optional[float] = None
    eta: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise AttackError("epsilon must lie in [0, 1], got {}".format(self.epsilon))
        if self.alpha is None:
            object.__setattr__(self, "alpha", min(max(self.epsilon / 10, 1 / 255), 0.01))
        if self.eta is None:
            eta = math.ceil(min(max(10.0, 2 * self.epsilon / self.alpha), 30.0))
            object.__setattr__(self, "eta", eta)
        if self.alpha <= 0:
            raise AttackError("alpha must be positive")
        if self.eta < 0:
            raise AttackError("eta must not be negative")

    def ball(self, origin: np.ndarray) -> "Box":
        """The feasible set around ``origin``."""

        origin = np.asarray(origin, dtype=T.DTYPE)
        radius = T.DTYPE(self.epsilon)
        return Box(np.clip(origin - radius, 0, 1), np.clip(origin + radius, 0, 1))


@dataclass(frozen=True, eq=False)
class Box:
    """Elementwise bounds; PGD projects every iterate into them."""

    lo: np.ndarray
    hi: np.ndarray

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi).astype(T.DTYPE)

    def contains(self, x: np.ndarray, tolerance: float = FEASIBILITY_TOLERANCE) -> bool:
        return bool(np.all(x >= self.lo - tolerance) and np.all(x <= self.hi + tolerance))


def universal_box(targets: np.ndarray, epsilon: float) -> Box:
    """Bounds on a shared perturbation keeping every target image feasible."""

    targets = np.asarray(targets, dtype=T.DTYPE)
    radius = T.DTYPE(epsilon)
    lo = np.maximum(-radius, -targets.min(axis=0))
    hi = np.minimum(radius, 1 - targets.max(axis=0))
    return Box(lo.astype(T.DTYPE), hi.astype(T.DTYPE))


@dataclass(frozen=True)
class AttackSpec:
    """Which attack to mount and against which counterparts.

    Attributes:
        kind: The attack.
        queries: Corpus indices Q of a candidate attack.
        candidates: Corpus indices C of a query attack.
        xi: Semantics-preserving weight; per-kind default when omitted.
        g: Size of the semantics-preserving neighbour group.
        pool_size: Corpus subsample size of the loss; ``None`` uses all.
    """

    kind: AttackKind
    queries: Tuple[int, ...] = ()
    candidates: Tuple[int, ...] = ()
    xi: Optional[float] = None
    g: int = DEFAULT_SP_GROUP
    pool_size: Optional[int] = DEFAULT_POOL_SIZE

    def __post_init__(self):
        kind = AttackKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "queries", tuple(int(i) for i in self.queries))
        object.__setattr__(self, "candidates", tuple(int(i) for i in self.candidates))
        if self.xi is None:
            object.__setattr__(self, "xi", DEFAULT_XI.get(kind, 0.0))

        if self.xi < 0:
            raise AttackError("xi must be non-negative")
        if self.g <= 0:
            raise AttackError("g must be positive")
        if self.pool_size is not None and self.pool_size <= 0:
            raise AttackError("pool_size must be positive or None")
        if kind.is_candidate and not self.queries:
            raise AttackError("{} needs a non-empty query set".format(kind.value))
        if kind.is_query and not self.candidates:
            raise AttackError("{} needs a non-empty candidate set".format(kind.value))
        if len(set(self.counterparts)) != len(self.counterparts):
            raise AttackError("Counterpart indices must be distinct")

    @property
    def counterparts(self) -> Tuple[int, ...]:
        if self.kind.is_candidate:
            return self.queries
        if self.kind.is_query:
            return self.candidates
        return ()

    def validate(self, corpus_size: int, item: Optional[int] = None) -> None:
        for index in self.counterparts:
            if not 0 <= index < corpus_size:
                raise AttackError("Index {} outside corpus of size {}".format(index, corpus_size))
        if item is not None and item in self.counterparts:
            raise AttackError("Attacked item {} is also its own counterpart".format(item))


@dataclass
class AttackOutcome:
    """Result of one per-image attack.

    Rank reports are ``None`` for the max-shift attack, which has no
    ranking target. ``sp_members`` are the frozen semantics-preserving
    neighbours of a query attack.
    """

    adversarial_image: np.ndarray
    rank_before: Optional[RankReport]
    rank_after: Optional[RankReport]
    sp_rank_before: Optional[RankReport]
    sp_rank_after: Optional[RankReport]
    embedding_shift: float
    loss_trace: List[float] = field(default_factory=list)
    sp_members: Tuple[int, ...] = ()


# Optimizer


def pgd(
    loss_fn: Callable[[T.Tensor], T.Tensor],
    x0: np.ndarray,
    budget: PerturbationBudget,
    ascent: bool = False,
    feasible: Optional[Box] = None,
) -> Tuple[np.ndarray, List[float]]:
    """Signed-gradient descent (or ascent) projected onto a box.

    Arguments:
        loss_fn: Maps the current iterate to a scalar loss tensor.
        x0: Starting point, typically the clean image batch.
        budget: Step size and iteration count; also defines the default
            feasible set around ``x0``.
        ascent: Maximize instead of minimize.
        feasible: Box replacing the default feasible set.

    Returns:
        The final iterate and the loss before every step.

    Raises:
        AttackError: Non-finite loss or gradient, or an infeasible iterate.
    """

    x0 = np.asarray(x0, dtype=T.DTYPE)
    box = feasible if feasible is not None else budget.ball(x0)
    step = T.DTYPE(budget.alpha)
    x = x0.copy()
    trace: List[float] = []

    for iteration in range(budget.eta):
        variable = T.Tensor(x, requires_grad=True)
        with T.Tape() as tape:
            loss = loss_fn(variable)
            if loss.requires_grad:
                tape.backward(loss)
        value = loss.item()
        grad = variable.grad if variable.grad is not None else np.zeros_like(x)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise AttackError(
                "Non-finite loss or gradient at PGD iteration {} (loss {!r})".format(iteration, value)
            )
        trace.append(value)

        direction = np.sign(grad).astype(T.DTYPE)
        x = box.project(x + step * direction if ascent else x - step * direction)
        if not box.contains(x):
            raise AttackError("PGD iterate {} left the feasible set".format(iteration))

    _log.debug("PGD finished %d iterations, final loss %s", budget.eta, trace[-1] if trace else None)
    return x, trace


# Loss construction


def choose_pool(
    index: RankingIndex,
    rng: Optional[np.random.Generator],
    size: Optional[int],
    exclude: Sequence[Optional[int]] = (),
) -> np.ndarray:
    """Corpus subsample used by the inner sums, sorted, without ``exclude``."""

    excluded = [int(i) for i in exclude if i is not None]
    eligible = np.setdiff1d(np.arange(index.size), excluded)
    if eligible.size == 0:
        raise AttackError("No corpus items left for the attack loss")
    if size is None or size >= eligible.size:
        return eligible
    rng = rng if rng is not None else np.random.default_rng(0)
    return np.sort(rng.choice(eligible, size=size, replace=False))


def select_sp_members(
    index: RankingIndex,
    query_embedding: np.ndarray,
    candidates: Sequence[int],
    g: int,
    exclude: Sequence[Optional[int]] = (),
) -> np.ndarray:
    """The ``g`` nearest corpus items to the unperturbed query outside C.

    Raises:
        AttackError: Fewer than ``g`` items remain outside C.
    """

    excluded = sorted({int(i) for i in (*candidates, *exclude) if i is not None})
    if index.size - len(excluded) < g:
        raise AttackError(
            "Only {} corpus items outside C, need {} for the semantics term".format(
                index.size - len(excluded), g
            )
        )
    try:
        return index.nearest(query_embedding, g, exclude=excluded)
    except MetricError as err:
        raise AttackError(str(err)) from err


def _corpus_rows(index: RankingIndex, rows: Sequence[int]) -> np.ndarray:
    return index.embeddings[np.asarray(rows, dtype=np.intp)].astype(T.DTYPE)


@dataclass(frozen=True, eq=False)
class Objective:
    """Loss of one attack target as a function of its embedding.

    Everything but the attacked embedding is a constant computed once:
    counterpart embeddings, pool embeddings (or, for candidate attacks,
    the counterpart-to-pool distances) and the semantics-preserving group.
    """

    kind: AttackKind
    metric: Metric
    anchors: np.ndarray
    pool: np.ndarray
    pool_distances: Optional[np.ndarray] = None
    sp_anchors: Optional[np.ndarray] = None
    xi: float = 0.0

    @classmethod
    def prepare(
        cls,
        kind: AttackKind,
        index: RankingIndex,
        counterparts: Sequence[int],
        pool: Optional[Sequence[int]] = None,
        xi: float = 0.0,
        sp_members: Optional[Sequence[int]] = None,
    ) -> "Objective":
        kind = AttackKind(kind)
        counterparts = np.asarray(counterparts, dtype=np.intp)
        if counterparts.size == 0:
            raise AttackError("{} needs counterparts".format(kind.value))
        if pool is None:
            pool = choose_pool(index, None, None, exclude=counterparts)
        pool = np.asarray(pool, dtype=np.intp)

        anchors = _corpus_rows(index, counterparts)
        pool_distances = None
        if kind.is_candidate and not kind.is_distance:
            pool_distances = np.stack(
                [index.distances(anchor)[pool] for anchor in index.embeddings[counterparts]]
            ).astype(T.DTYPE)
        sp_anchors = None
        if kind.is_query and not kind.is_distance and xi > 0:
            if sp_members is None:
                raise AttackError("Semantics-preserving term needs its neighbour group")
            sp_anchors = _corpus_rows(index, sp_members)

        return cls(kind, index.metric, anchors, _corpus_rows(index, pool), pool_distances, sp_anchors, xi)

    def __call__(self, embedding: T.Tensor) -> T.Tensor:
        kind = self.kind.base if not self.kind.is_distance else self.kind
        to_anchors = row_distance(self.anchors, embedding, self.metric)

        if kind is AttackKind.DIST_CA_PLUS:
            return T.reduce_sum(to_anchors)
        if kind is AttackKind.DIST_QA_MINUS:
            return T.neg(T.reduce_sum(to_anchors))

        if kind.is_candidate:
            terms = T.sub(T.reshape(to_anchors, (-1, 1)), self.pool_distances)
            return T.reduce_sum(T.relu(terms if kind.raises else T.neg(terms)))

        to_pool = T.reshape(row_distance(self.pool, embedding, self.metric), (1, -1))
        terms = T.sub(T.reshape(to_anchors, (-1, 1)), to_pool)
        loss = T.reduce_sum(T.relu(terms if kind.raises else T.neg(terms)))
        if self.sp_anchors is not None and self.xi > 0:
            to_sp = row_distance(self.sp_anchors, embedding, self.metric)
            keep = T.reduce_sum(T.relu(T.sub(T.reshape(to_sp, (-1, 1)), to_pool)))
            loss = T.add(loss, T.mul(keep, self.xi))
        return loss


def _as_batch(image: T.TensorLike) -> T.Tensor:
    image = T.as_tensor(image)
    return T.reshape(image, (1, -1)) if image.ndim == 1 else image


def candidate_hinge_terms(c_img, Q, index: RankingIndex, model: EmbeddingModel, pool=None) -> T.Tensor:
    """Hinge arguments ``d(q, c) - d(q, x)`` of a candidate attack, ``|Q| x |pool|``."""

    objective = Objective.prepare(AttackKind.CA_PLUS, index, Q, pool)
    to_anchors = row_distance(objective.anchors, embed(model, _as_batch(c_img)), index.metric)
    return T.sub(T.reshape(to_anchors, (-1, 1)), objective.pool_distances)


def loss_ca_plus(c_img, Q, index: RankingIndex, model: EmbeddingModel, pool=None) -> T.Tensor:
    """Candidate attack raising ``c`` toward the top for every query in Q."""

    return Objective.prepare(AttackKind.CA_PLUS, index, Q, pool)(embed(model, _as_batch(c_img)))


def loss_ca_minus(c_img, Q, index: RankingIndex, model: EmbeddingModel, pool=None) -> T.Tensor:
    """Candidate attack pushing ``c`` toward the bottom for every query in Q."""

    return Objective.prepare(AttackKind.CA_MINUS, index, Q, pool)(embed(model, _as_batch(c_img)))


def loss_qa_plus(q_img, C, index: RankingIndex, model: EmbeddingModel, pool=None) -> T.Tensor:
    """Query attack raising every candidate in C toward the top."""

    return Objective.prepare(AttackKind.QA_PLUS, index, C, pool)(embed(model, _as_batch(q_img)))


def loss_qa_minus(q_img, C, index: RankingIndex, model: EmbeddingModel, pool=None) -> T.Tensor:
    """Query attack pushing every candidate in C toward the bottom."""

    return Objective.prepare(AttackKind.QA_MINUS, index, C, pool)(embed(model, _as_batch(q_img)))


def loss_sp_qa(
    q_img,
    C,
    index: RankingIndex,
    model: EmbeddingModel,
    xi: float,
    g: int,
    direction: Union[AttackKind, str],
    pool=None,
    sp_members: Optional[Sequence[int]] = None,
    exclude: Sequence[Optional[int]] = (),
) -> T.Tensor:
    """Query attack plus ``xi`` times a term keeping C_SP at the top.

    C_SP must come from the *unperturbed* query; when ``sp_members`` is
    omitted it is computed from ``q_img``, which is only correct before
    any perturbation. With ``xi == 0`` the result is the plain query loss.
    """

    direction = AttackKind(direction).base
    if not direction.is_query:
        raise AttackError("Direction must be QA+ or QA-, got {}".format(direction.value))

    embedding = embed(model, _as_batch(q_img))
    if sp_members is None:
        sp_members = select_sp_members(index, embedding.data[0], C, g, exclude)
    elif index.size - len(set(C) | {i for i in exclude if i is not None}) < g:
        raise AttackError("Fewer than {} corpus items outside C".format(g))

    objective = Objective.prepare(direction, index, C, pool, xi, sp_members)
    return objective(embedding)


def loss_max_shift(
    x_img,
    model: EmbeddingModel,
    origin: Optional[np.ndarray] = None,
    metric: Union[Metric, str, None] = None,
) -> T.Tensor:
    """Total embedding displacement ``sum d(f(x), origin)``; maximized.

    ``origin`` defaults to the embedding of ``x_img`` itself, where the
    displacement is zero.
    """

    metric = model.metric if metric is None else Metric.coerce(metric)
    batch = _as_batch(x_img)
    embedding = embed(model, batch)
    if origin is None:
        origin = embedding.data.copy()
    return T.reduce_sum(row_distance(embedding, np.asarray(origin, dtype=T.DTYPE), metric))


def distance_alt_loss(img, targets, index: RankingIndex, model: EmbeddingModel, kind) -> T.Tensor:
    """Distance objective without hinges: pull toward Q, or push from C."""

    kind = AttackKind(kind)
    if not kind.is_distance:
        raise AttackError("{} is not a distance-based attack".format(kind.value))
    return Objective.prepare(kind, index, targets)(embed(model, _as_batch(img)))


# Max-shift


def max_shift_attack(
    images: np.ndarray,
    model: EmbeddingModel,
    budget: PerturbationBudget,
    metric: Union[Metric, str, None] = None,
    seed: int = 0,
) -> Tuple[np.ndarray, List[float], np.ndarray]:
    """Move each image's embedding as far as possible from its start.

    The first iteration measures against a slightly offset reference: at
    the starting point the displacement is zero and so is its gradient.

    Returns:
        Adversarial images, loss trace and the per-image final shift.
    """

    metric = model.metric if metric is None else Metric.coerce(metric)
    images = np.atleast_2d(np.asarray(images, dtype=T.DTYPE))
    origin = embed_array(model, images)
    jitter = SHIFT_JITTER * np.random.default_rng(seed).choice([-1.0, 1.0], size=origin.shape)
    reference = [(origin + jitter).astype(T.DTYPE)]

    def objective(x: T.Tensor) -> T.Tensor:
        target = reference.pop() if reference else origin
        return loss_max_shift(x, model, target, metric)

    adversarial, trace = pgd(objective, images, budget, ascent=True)
    moved = embed_array(model, adversarial)
    shifts = row_distance(moved, origin, metric).data.astype(np.float64)
    return adversarial, trace, np.maximum(shifts, 0.0)


# Rank measurement


def rank_report(
    index: RankingIndex,
    kind: AttackKind,
    embedding: np.ndarray,
    counterparts: Sequence[int],
    item: Optional[int] = None,
    sp_members: Sequence[int] = (),
) -> Tuple[RankReport, Optional[RankReport]]:
    """Normalized ranks of one attacked target over the full corpus.

    For a candidate attack, the rank of the candidate ``embedding`` for each
    query in Q; for a query attack, the rank of each candidate in C (and of
    each semantics-preserving neighbour) for the query ``embedding``. The
    query itself and the attacked item's corpus copy are left out of every
    count.
    """

    kind = AttackKind(kind)
    embedding = np.asarray(embedding, dtype=np.float64).reshape(-1)
    size = index.size

    if kind.is_candidate:
        ranks = []
        for q in counterparts:
            query = index.embeddings[q]
            threshold = index.distances_between(query, embedding)[0]
            exclude = (q,) if item is None else (q, item)
            ranks.append(index.rank_at(index.distances(query), threshold, exclude=exclude) / size)
        return attack_performance([ranks]), None

    dist = index.distances(embedding)
    exclude = () if item is None else (item,)
    ranks = [index.rank_at(dist, dist[c], exclude=exclude) / size for c in counterparts]
    report = attack_performance([ranks])
    sp_report = None
    if len(sp_members):
        sp_ranks = [index.rank_at(dist, dist[c], exclude=exclude) / size for c in sp_members]
        sp_report = attack_performance([sp_ranks])
    return report, sp_report


def embedding_shift(a: np.ndarray, b: np.ndarray, metric) -> float:
    try:
        return distance(a, b, metric)
    except MetricError as err:
        raise AttackError(str(err)) from err


def run_attack(
    model: EmbeddingModel,
    index: RankingIndex,
    spec: AttackSpec,
    budget: PerturbationBudget,
    item: Union[int, np.ndarray],
    rng: Optional[np.random.Generator] = None,
    pool: Optional[np.ndarray] = None,
) -> AttackOutcome:
    """Mount one per-image attack and measure it.

    Arguments:
        model: The attacked (immutable) model; ``index`` must be built from it.
        index: The corpus.
        spec: Attack kind and counterparts.
        budget: Attack strength.
        item: Corpus position of the attacked image (requires corpus
            images in ``index``) or a raw flattened image.
        rng: Source of the loss pool subsample.
        pool: Pre-drawn loss pool replacing the random one.

    Raises:
        AttackError: Invalid arguments or a failed optimization.
    """

    kind = spec.kind
    if kind.is_universal:
        raise AttackError("Universal attacks are crafted with craft_universal()")

    if isinstance(item, (int, np.integer)):
        item_id: Optional[int] = int(item)
        if not 0 <= item_id < index.size:
            raise AttackError("Item {} outside corpus of size {}".format(item_id, index.size))
        if index.images is None:
            raise AttackError("Attacking a corpus item needs the corpus images")
        x0 = index.images[item_id]
    else:
        item_id = None
        x0 = np.asarray(item, dtype=T.DTYPE).reshape(-1)
    spec.validate(index.size, item_id)

    x0 = x0[np.newaxis, :]
    clean = embed(model, x0).data[0]

    if kind is AttackKind.MAX_SHIFT:
        adversarial, trace, shifts = max_shift_attack(x0, model, budget, index.metric)
        return AttackOutcome(adversarial[0], None, None, None, None, float(shifts[0]), trace)

    counterparts = spec.counterparts
    sp_members: Tuple[int, ...] = ()
    if kind.is_query:
        sp_members = tuple(
            int(i) for i in select_sp_members(index, clean, counterparts, spec.g, (item_id,))
        )
    if pool is None:
        pool = choose_pool(index, rng, spec.pool_size, exclude=(item_id, *counterparts))
    objective = Objective.prepare(kind, index, counterparts, pool, spec.xi, sp_members)

    adversarial, trace = pgd(lambda x: objective(embed(model, x)), x0, budget)
    moved = embed(model, adversarial).data[0]

    before, sp_before = rank_report(index, kind, clean, counterparts, item_id, sp_members)
    after, sp_after = rank_report(index, kind, moved, counterparts, item_id, sp_members)
    _log.debug(
        "%s attack: rank %.4f -> %.4f", kind.value, before.mean_rank, after.mean_rank
    )
    return AttackOutcome(
        adversarial[0],
        before,
        after,
        sp_before,
        sp_after,
        embedding_shift(clean, moved, index.metric),
        trace,
        sp_members,
    )


# Universal perturbations


def universal_loss(
    r: T.TensorLike,
    targets: np.ndarray,
    objectives: Sequence[Objective],
    model: EmbeddingModel,
) -> T.Tensor:
    """Sum of per-target attack losses under one shared perturbation ``r``.

    ``objectives[i]`` is the prepared loss of ``targets[i]``.

    Raises:
        AttackError: No targets, or targets and objectives differ in number.
    """

    targets = np.atleast_2d(np.asarray(targets, dtype=T.DTYPE))
    if targets.shape[0] == 0 or not len(objectives):
        raise AttackError("Universal perturbation needs at least one target")
    if targets.shape[0] != len(objectives):
        raise AttackError("Expected one objective per universal target")

    embeddings = embed(model, T.add(targets, r))
    total = None
    for position, objective in enumerate(objectives):
        loss = objective(T.take_rows(embeddings, [position]))
        total = loss if total is None else T.add(total, loss)
    return total


@dataclass
class UniversalPerturbation:
    perturbation: np.ndarray
    loss_trace: List[float]
    box: Box


def craft_universal(
    model: EmbeddingModel,
    index: RankingIndex,
    targets: np.ndarray,
    objectives: Sequence[Objective],
    budget: PerturbationBudget,
    rng: np.random.Generator,
    batch: int = 32,
    iterations_factor: int = 5,
) -> UniversalPerturbation:
    """Optimize one perturbation shared by all ``targets``.

    PGD starts from zero and runs ``iterations_factor`` times the per-image
    iteration count; every step averages the loss over a mini-batch of
    ``batch`` targets, cycling through shuffled targets. The perturbation is
    bounded by epsilon and keeps every target image inside [0, 1].
    """

    targets = np.atleast_2d(np.asarray(targets, dtype=T.DTYPE))
    if targets.shape[0] == 0:
        raise AttackError("Universal perturbation needs at least one target")
    if targets.shape[0] != len(objectives):
        raise AttackError("Expected one objective per universal target")

    box = universal_box(targets, budget.epsilon)
    schedule: List[int] = []

    def next_batch() -> np.ndarray:
        while len(schedule) < batch:
            schedule.extend(int(i) for i in rng.permutation(targets.shape[0]))
        chosen = np.array(schedule[:batch], dtype=np.intp)
        del schedule[:batch]
        return np.unique(chosen)

    def objective(r: T.Tensor) -> T.Tensor:
        chosen = next_batch()
        loss = universal_loss(r, targets[chosen], [objectives[i] for i in chosen], model)
        return T.mul(loss, 1.0 / chosen.size)

    schedule_budget = PerturbationBudget(budget.epsilon, budget.alpha, budget.eta * iterations_factor)
    start = np.zeros(targets.shape[1], dtype=T.DTYPE)
    perturbation, trace = pgd(objective, start, schedule_budget, feasible=box)
    return UniversalPerturbation(perturbation, trace, box)
