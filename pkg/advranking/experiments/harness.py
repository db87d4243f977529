"""Experiment protocols: attack sweeps, transfer, universal and xi search.

Every protocol breaks down into independent *cells*, keyed by
(model, kind, epsilon, w/m). Cells run in a process pool, or inline with a
single job, and land in a :class:`ResultTable` that sorts them by key, so
the outcome does not depend on completion order.

Trial selection (attacked items, counterparts, loss pools) is seeded from
the master seed, the model label, the attack kind and w/m. The epsilon is
deliberately left out: all epsilon cells of one (model, kind, w/m) attack
the same items, and a transfer diagonal reproduces the sweep cell.
"""

import logging
import re
import zlib
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from advranking import AdvrankingError
from advranking.attacks import (
    AttackKind,
    DEFAULT_XI,
    AttackSpec,
    Objective,
    PerturbationBudget,
    choose_pool,
    craft_universal,
    rank_report,
    run_attack,
    select_sp_members,
)
from advranking.datasets import Dataset, sample_attack_targets, to_bytes, write_idx
from advranking.metrics import RankingIndex
from advranking.ranker import EmbeddingModel, embed, embed_array

logger = logging.getLogger(__name__)

#: Fraction of the corpus used to craft (and, disjointly, to test) a universal perturbation
UNIVERSAL_FRACTION = 0.05
#: Smallest acceptable universal training set
UNIVERSAL_MIN_TARGETS = 32

_KIND_ORDER = {kind: position for position, kind in enumerate(AttackKind)}


class ExperimentError(AdvrankingError):
    """An experiment plan is inconsistent or a protocol cannot run."""


class ResultKey(NamedTuple):
    model: str
    kind: AttackKind
    epsilon: float
    wm: int

    def sort_key(self):
        return self.model, _KIND_ORDER[AttackKind(self.kind)], self.epsilon, self.wm


@dataclass
class CellResult:
    """Aggregate of one cell; rank values are normalized, ``None`` when undefined.

    A failed cell keeps its key and the failure message in ``error``.
    """

    key: ResultKey
    rank_before: Optional[float] = None
    rank_after: Optional[float] = None
    sp_before: Optional[float] = None
    sp_after: Optional[float] = None
    shift: Optional[float] = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class ResultTable:
    cells: Dict[ResultKey, CellResult] = field(default_factory=dict)

    def add(self, cell: CellResult) -> None:
        if cell.key in self.cells:
            raise ExperimentError("Duplicate result cell {}".format(cell.key))
        self.cells[cell.key] = cell

    def extend(self, cells: Iterable[CellResult]) -> "ResultTable":
        for cell in cells:
            self.add(cell)
        return self

    def rows(self) -> List[CellResult]:
        return [self.cells[key] for key in sorted(self.cells, key=ResultKey.sort_key)]

    def __getitem__(self, key) -> CellResult:
        return self.cells[ResultKey(*key)]

    def __len__(self):
        return len(self.cells)

    @property
    def errors(self) -> List[CellResult]:
        return [cell for cell in self.rows() if cell.failed]


@dataclass(frozen=True)
class ModelRef:
    """A model taking part in an experiment, under its table label."""

    label: str
    model: EmbeddingModel


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid and trial parameters shared by every protocol.

    Attributes:
        models: Attacked models.
        kinds: Attack kinds of the sweep.
        epsilon_grid: Perturbation radii.
        wm_grid: Numbers of queries (CA) or candidates (QA).
        trials: Attacks per cell; ``None`` attacks every corpus item once.
        seed: Master seed.
        corpus_size: Items taken from the head of the test split.
        pool_size: Loss subsample size; ``None`` uses the full corpus.
        g: Semantics-preserving group size.
        xi: Semantics-preserving weight overriding the per-kind default.
        xi_defaults: Per-kind weight of the query attacks.
        jobs: Worker processes.
        dump_dir: Directory receiving the adversarial images of every cell.
    """

    models: Tuple[ModelRef, ...]
    kinds: Tuple[AttackKind, ...] = (AttackKind.CA_PLUS,)
    epsilon_grid: Tuple[float, ...] = (0.01, 0.03, 0.1, 0.3)
    wm_grid: Tuple[int, ...] = (1, 2, 5, 10)
    trials: Optional[int] = 200
    seed: int = 0
    corpus_size: Optional[int] = 2000
    pool_size: Optional[int] = 256
    g: int = 5
    xi: Optional[float] = None
    xi_defaults: Mapping[AttackKind, float] = field(default_factory=lambda: dict(DEFAULT_XI))
    jobs: int = 1
    dump_dir: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "kinds", tuple(AttackKind(kind) for kind in self.kinds))
        object.__setattr__(self, "epsilon_grid", tuple(float(e) for e in self.epsilon_grid))
        object.__setattr__(self, "wm_grid", tuple(int(wm) for wm in self.wm_grid))
        if not self.models:
            raise ExperimentError("An experiment needs at least one model")
        labels = [ref.label for ref in self.models]
        if len(set(labels)) != len(labels):
            raise ExperimentError("Model labels must be unique: {}".format(", ".join(labels)))
        if not self.kinds or not self.epsilon_grid or not self.wm_grid:
            raise ExperimentError("Attack kinds, epsilon grid and w/m grid must not be empty")
        if any(not 0 <= e <= 1 for e in self.epsilon_grid):
            raise ExperimentError("Every epsilon must lie in [0, 1]")
        if any(wm <= 0 for wm in self.wm_grid):
            raise ExperimentError("Every w/m must be positive")
        if self.trials is not None and self.trials <= 0:
            raise ExperimentError("trials must be positive")
        if self.jobs <= 0:
            raise ExperimentError("jobs must be positive")

    def model(self, label: str) -> EmbeddingModel:
        for ref in self.models:
            if ref.label == label:
                return ref.model
        raise ExperimentError("Unknown model {!r}".format(label))

    def cells(self) -> Iterator[ResultKey]:
        for ref in self.models:
            for kind in self.kinds:
                if kind.is_universal:
                    raise ExperimentError("{} belongs to the universal protocol".format(kind.value))
                wm_grid = (0,) if kind is AttackKind.MAX_SHIFT else self.wm_grid
                for epsilon in self.epsilon_grid:
                    for wm in wm_grid:
                        yield ResultKey(ref.label, kind, epsilon, wm)


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Generator seeded by ``seed`` and a stable hash of ``parts``."""

    entropy = [int(seed)] + [zlib.crc32(str(part).encode("utf-8")) for part in parts]
    return np.random.default_rng(np.random.SeedSequence(entropy))


# Worker context

_CONTEXT: Dict[str, object] = {}


def _install(plan: ExperimentPlan, corpus: Dataset) -> None:
    _CONTEXT.clear()
    _CONTEXT.update(plan=plan, corpus=corpus, indexes={})


def corpus_index(model: EmbeddingModel, corpus: Dataset) -> RankingIndex:
    return RankingIndex(embed_array(model, corpus.images), model.metric, corpus.labels, corpus.images)


def _index(label: str) -> RankingIndex:
    indexes = _CONTEXT["indexes"]
    if label not in indexes:
        plan = _CONTEXT["plan"]
        indexes[label] = corpus_index(plan.model(label), _CONTEXT["corpus"])
    return indexes[label]


def _map(worker, tasks: Sequence, plan: ExperimentPlan, corpus: Dataset) -> List:
    if plan.jobs <= 1 or len(tasks) <= 1:
        _install(plan, corpus)
        return [worker(task) for task in tasks]
    with Pool(processes=plan.jobs, initializer=_install, initargs=(plan, corpus)) as pool:
        return pool.map(worker, tasks)


# Trials


class Trial(NamedTuple):
    item: int
    counterparts: Tuple[int, ...]
    pool: Optional[np.ndarray]


def plan_trials(
    index: RankingIndex,
    kind: AttackKind,
    wm: int,
    trials: Optional[int],
    rng: np.random.Generator,
    pool_size: Optional[int],
) -> List[Trial]:
    """Attacked items, their counterparts and loss pools for one cell.

    Items are distinct; ``trials`` larger than the corpus attacks each item
    once.
    """

    count = index.size if trials is None else min(trials, index.size)
    items = rng.choice(index.size, size=count, replace=False)
    planned = []
    for item in items:
        item = int(item)
        if kind is AttackKind.MAX_SHIFT:
            planned.append(Trial(item, (), None))
            continue
        counterparts = tuple(int(i) for i in sample_attack_targets(index, kind, wm, rng, item))
        pool = choose_pool(index, rng, pool_size, exclude=(item, *counterparts))
        planned.append(Trial(item, counterparts, pool))
    return planned


def _spec(kind: AttackKind, counterparts: Sequence[int], plan: ExperimentPlan, xi=None) -> AttackSpec:
    if kind is AttackKind.MAX_SHIFT:
        return AttackSpec(kind)
    field_name = "queries" if kind.is_candidate else "candidates"
    xi = plan.xi if xi is None else xi
    if xi is None:
        xi = plan.xi_defaults.get(kind)
    return AttackSpec(kind, g=plan.g, pool_size=plan.pool_size, xi=xi, **{field_name: counterparts})


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _attack_trials(
    model: EmbeddingModel,
    index: RankingIndex,
    key: ResultKey,
    plan: ExperimentPlan,
    label: Optional[str] = None,
    xi: Optional[float] = None,
):
    """Run the trials of one cell; yields (trial, spec, outcome)."""

    kind = AttackKind(key.kind)
    rng = derive_rng(plan.seed, label or key.model, kind.value, key.wm)
    budget = PerturbationBudget(key.epsilon)
    for trial in plan_trials(index, kind, key.wm, plan.trials, rng, plan.pool_size):
        spec = _spec(kind, trial.counterparts, plan, xi)
        yield trial, spec, run_attack(model, index, spec, budget, trial.item, pool=trial.pool)


def _aggregate(key: ResultKey, outcomes) -> CellResult:
    outcomes = list(outcomes)

    def mean_of(getter):
        return _mean([getter(outcome) for outcome in outcomes])

    return CellResult(
        key,
        rank_before=mean_of(lambda o: o.rank_before and o.rank_before.mean_rank),
        rank_after=mean_of(lambda o: o.rank_after and o.rank_after.mean_rank),
        sp_before=mean_of(lambda o: o.sp_rank_before and o.sp_rank_before.mean_rank),
        sp_after=mean_of(lambda o: o.sp_rank_after and o.sp_rank_after.mean_rank),
        shift=mean_of(lambda o: o.embedding_shift),
    )


def _dump(dump_dir: Path, key: ResultKey, images: np.ndarray, corpus: Dataset) -> None:
    stem = re.sub(r"[^A-Za-z0-9_.+-]", "_", "{}_{}_{:g}_{}".format(key.model, key.kind.value, key.epsilon, key.wm))
    raw = to_bytes(images).reshape((images.shape[0], *corpus.image_shape))
    if raw.ndim != 3:
        raw = raw.reshape(images.shape[0], 1, -1)
    write_idx(Path(dump_dir) / "{}-images-idx3-ubyte".format(stem), raw)


def _sweep_cell(key: ResultKey) -> CellResult:
    plan: ExperimentPlan = _CONTEXT["plan"]
    try:
        model = plan.model(key.model)
        index = _index(key.model)
        results = list(_attack_trials(model, index, key, plan))
        if plan.dump_dir is not None and results:
            _dump(plan.dump_dir, key, np.stack([o.adversarial_image for _, _, o in results]), _CONTEXT["corpus"])
        cell = _aggregate(key, (outcome for _, _, outcome in results))
    except Exception as err:
        logger.error("Cell %s %s eps=%g wm=%d failed: %s", key.model, key.kind.value, key.epsilon, key.wm, err)
        return CellResult(key, error="{}: {}".format(type(err).__name__, err))
    logger.info(
        "Cell %s %s eps=%g wm=%d: rank %s -> %s",
        key.model, key.kind.value, key.epsilon, key.wm, cell.rank_before, cell.rank_after,
    )
    return cell


def run_attack_sweep(plan: ExperimentPlan, corpus: Dataset) -> ResultTable:
    """Every (model, kind, epsilon, w/m) cell of ``plan`` over ``corpus``.

    Failing cells become ERROR cells; the sweep carries on.
    """

    corpus = corpus.head(plan.corpus_size)
    keys = list(plan.cells())
    logger.info("Sweeping %d cells over %d corpus items", len(keys), len(corpus))
    return ResultTable().extend(_map(_sweep_cell, keys, plan, corpus))


# Transfer


def transfer_label(source: str, target: str) -> str:
    return "{}->{}".format(source, target)


def _transfer_cell(task) -> List[CellResult]:
    key, targets = task
    plan: ExperimentPlan = _CONTEXT["plan"]
    source = key.model
    keys = [ResultKey(transfer_label(source, target), key.kind, key.epsilon, key.wm) for target in targets]
    try:
        model = plan.model(source)
        index = _index(source)
        per_target: Dict[str, List] = {target: [] for target in targets}
        for trial, spec, outcome in _attack_trials(model, index, key, plan):
            for target in targets:
                if target == source:
                    per_target[target].append(outcome)
                else:
                    per_target[target].append(
                        _transferred(plan.model(target), _index(target), spec, trial, outcome)
                    )
        cells = [_aggregate(k, per_target[t]) for k, t in zip(keys, targets)]
    except Exception as err:
        logger.error("Transfer from %s (%s eps=%g) failed: %s", source, key.kind.value, key.epsilon, err)
        return [CellResult(k, error="{}: {}".format(type(err).__name__, err)) for k in keys]
    for cell in cells:
        logger.info("Cell %s %s eps=%g: rank %s -> %s", cell.key.model, key.kind.value, key.epsilon, cell.rank_before, cell.rank_after)
    return cells


def _transferred(model: EmbeddingModel, index: RankingIndex, spec: AttackSpec, trial: Trial, outcome):
    """The outcome of an adversarial image crafted elsewhere, measured on ``model``."""

    clean_image = index.images[trial.item][np.newaxis, :]
    clean = embed(model, clean_image).data[0]
    moved = embed(model, outcome.adversarial_image[np.newaxis, :]).data[0]
    sp_members: Sequence[int] = ()
    if spec.kind.is_query:
        sp_members = select_sp_members(index, clean, spec.counterparts, spec.g, (trial.item,))
    before, sp_before = rank_report(index, spec.kind, clean, spec.counterparts, trial.item, sp_members)
    after, sp_after = rank_report(index, spec.kind, moved, spec.counterparts, trial.item, sp_members)
    return replace(
        outcome,
        rank_before=before,
        rank_after=after,
        sp_rank_before=sp_before,
        sp_rank_after=sp_after,
        embedding_shift=float(index.distances_between(clean, moved)[0]),
    )


def run_transfer(
    sources: Sequence[ModelRef],
    targets: Sequence[ModelRef],
    plan: ExperimentPlan,
    corpus: Dataset,
) -> ResultTable:
    """Craft on every source, evaluate on every target.

    Cells are labelled ``source->target``; the diagonal (a model attacking
    itself) is the white-box result and matches the sweep cell of the same
    configuration.

    Raises:
        ExperimentError: Fewer than two distinct models, or models that
            disagree on the input dimension.
    """

    everyone = {ref.label: ref for ref in (*sources, *targets)}
    if len(everyone) < 2:
        raise ExperimentError("Transfer needs at least two distinct models")
    dims = {ref.model.input_dim for ref in everyone.values()}
    if len(dims) != 1:
        raise ExperimentError("Models disagree on the input dimension: {}".format(sorted(dims)))
    if any(kind is AttackKind.MAX_SHIFT or kind.is_universal for kind in plan.kinds):
        raise ExperimentError("Transfer supports the per-image ranking attacks only")

    plan = replace(plan, models=tuple(everyone.values()))
    corpus = corpus.head(plan.corpus_size)
    target_labels = tuple(ref.label for ref in targets)
    tasks = []
    for ref in sources:
        for kind in plan.kinds:
            for epsilon in plan.epsilon_grid:
                for wm in plan.wm_grid:
                    tasks.append((ResultKey(ref.label, kind, epsilon, wm), target_labels))
    table = ResultTable()
    for cells in _map(_transfer_cell, tasks, plan, corpus):
        table.extend(cells)
    return table


# Universal perturbations


@dataclass
class UniversalResult:
    table: ResultTable
    perturbation: np.ndarray
    seen: np.ndarray
    unseen: np.ndarray


def split_universal(size: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Two disjoint random corpus subsets of ``floor(fraction * size)`` items.

    Raises:
        ExperimentError: The subsets would hold fewer than
            :data:`UNIVERSAL_MIN_TARGETS` items.
    """

    count = int(np.floor(fraction * size))
    if count < UNIVERSAL_MIN_TARGETS or 2 * count > size:
        raise ExperimentError(
            "Universal protocol needs {} <= {} * |X| <= |X| / 2, got |X| = {}".format(
                UNIVERSAL_MIN_TARGETS, fraction, size
            )
        )
    order = rng.permutation(size)
    seen, unseen = np.sort(order[:count]), np.sort(order[count:2 * count])
    if np.intersect1d(seen, unseen).size:
        raise ExperimentError("Universal seen and unseen sets overlap")
    return seen, unseen


def _universal_objectives(index, kind, items, wm, rng, plan: ExperimentPlan, xi: float):
    objectives, specs = [], []
    for item in items:
        item = int(item)
        counterparts = tuple(int(i) for i in sample_attack_targets(index, kind, wm, rng, item))
        pool = choose_pool(index, rng, plan.pool_size, exclude=(item, *counterparts))
        sp_members: Sequence[int] = ()
        if kind.is_query:
            sp_members = select_sp_members(index, index.embeddings[item], counterparts, plan.g, (item,))
        objectives.append(Objective.prepare(kind, index, counterparts, pool, xi, sp_members))
        specs.append((item, counterparts, tuple(int(i) for i in sp_members)))
    return objectives, specs


def _evaluate_universal(model, index, kind, specs, perturbation, key: ResultKey) -> CellResult:
    items = np.array([item for item, _, _ in specs], dtype=np.intp)
    clean = embed_array(model, index.images[items])
    moved = embed_array(model, np.clip(index.images[items] + perturbation, 0, 1))
    befores, afters, sp_befores, sp_afters, shifts = [], [], [], [], []
    for position, (item, counterparts, sp_members) in enumerate(specs):
        before, sp_before = rank_report(index, kind, clean[position], counterparts, item, sp_members)
        after, sp_after = rank_report(index, kind, moved[position], counterparts, item, sp_members)
        befores.append(before.mean_rank)
        afters.append(after.mean_rank)
        sp_befores.append(sp_before and sp_before.mean_rank)
        sp_afters.append(sp_after and sp_after.mean_rank)
        shifts.append(float(index.distances_between(clean[position], moved[position])[0]))
    return CellResult(key, _mean(befores), _mean(afters), _mean(sp_befores), _mean(sp_afters), _mean(shifts))


def run_universal(
    ref: ModelRef,
    kind: AttackKind,
    epsilon: float,
    wm: int,
    plan: ExperimentPlan,
    corpus: Dataset,
    train_frac: float = UNIVERSAL_FRACTION,
    xi: float = 0.0,
) -> UniversalResult:
    """Craft one perturbation on a seen subset and test it on an unseen one.

    The table holds two cells, labelled ``<model>/seen`` and
    ``<model>/unseen``. ``plan.trials`` caps the number of evaluated targets
    of each subset.
    """

    kind = AttackKind(kind)
    if not kind.is_universal:
        raise ExperimentError("{} is not a universal attack".format(kind.value))

    corpus = corpus.head(plan.corpus_size)
    model = ref.model
    index = corpus_index(model, corpus)
    rng = derive_rng(plan.seed, ref.label, kind.value, wm)
    seen, unseen = split_universal(index.size, train_frac, rng)

    objectives, seen_specs = _universal_objectives(index, kind, seen, wm, rng, plan, xi)
    budget = PerturbationBudget(epsilon)
    crafted = craft_universal(model, index, index.images[seen], objectives, budget, rng)
    logger.info("Crafted %s perturbation on %d targets of %s", kind.value, len(seen), ref.label)

    _, unseen_specs = _universal_objectives(index, kind, unseen, wm, rng, plan, xi)
    limit = plan.trials or len(seen)
    table = ResultTable()
    for suffix, specs in (("seen", seen_specs), ("unseen", unseen_specs)):
        key = ResultKey("{}/{}".format(ref.label, suffix), kind, float(epsilon), int(wm))
        table.add(_evaluate_universal(model, index, kind, specs[:limit], crafted.perturbation, key))
    return UniversalResult(table, crafted.perturbation, seen, unseen)


# Semantics-preserving weight search


def xi_label(model: str, xi: float) -> str:
    return "{}/xi={:g}".format(model, xi)


def _xi_cell(task) -> CellResult:
    key, xi = task
    plan: ExperimentPlan = _CONTEXT["plan"]
    label = xi_label(key.model, xi)
    try:
        model = plan.model(key.model)
        outcomes = [o for _, _, o in _attack_trials(model, _index(key.model), key, plan, xi=xi)]
        cell = _aggregate(key._replace(model=label), outcomes)
    except Exception as err:
        logger.error("Cell %s %s eps=%g failed: %s", label, key.kind.value, key.epsilon, err)
        return CellResult(key._replace(model=label), error="{}: {}".format(type(err).__name__, err))
    logger.info("Cell %s %s: rank %s -> %s, C_SP %s -> %s", label, key.kind.value, cell.rank_before, cell.rank_after, cell.sp_before, cell.sp_after)
    return cell


def run_xi_search(plan: ExperimentPlan, corpus: Dataset, xi_grid: Sequence[float]) -> ResultTable:
    """Query attacks of ``plan`` repeated for every semantics-preserving weight.

    Cells are labelled ``<model>/xi=<xi>``; every weight attacks the same
    items.

    Raises:
        ExperimentError: ``xi_grid`` is empty, not ascending or negative,
            or the plan holds non-query kinds.
    """

    xi_grid = [float(xi) for xi in xi_grid]
    if not xi_grid or any(b < a for a, b in zip(xi_grid, xi_grid[1:])) or xi_grid[0] < 0:
        raise ExperimentError("xi grid must be non-empty, non-negative and ascending")
    if any(not (kind.is_query and not kind.is_universal and not kind.is_distance) for kind in plan.kinds):
        raise ExperimentError("xi search runs QA+ and QA- attacks only")

    corpus = corpus.head(plan.corpus_size)
    tasks = [(key, xi) for key in plan.cells() for xi in xi_grid]
    return ResultTable().extend(_map(_xi_cell, tasks, plan, corpus))
