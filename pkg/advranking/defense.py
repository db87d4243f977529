"""Adversarial training against embedding shifts.

The defense replaces every training image by its max-shift adversarial
counterpart before the metric-learning loss is evaluated, so the model
learns to keep embeddings in place under bounded perturbations. The inner
attack sees the parameters as constants; the outer update differentiates
a fresh forward pass through the perturbed images.

The ``trip-es`` variant keeps clean samples in the metric loss and adds the
attained shift distance as a penalty instead.

Direct ports of classification defenses (training on adversarial examples
of the ranking loss itself, or mixing clean and adversarial losses) are not
offered: their losses diverge for metric learning.
"""

import enum
import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .attacks import PerturbationBudget, max_shift_attack
from .metrics import row_distance
from .ranker import (
    Batch,
    EmbeddingModel,
    PairBatch,
    StepResult,
    TrainConfig,
    TrainHistory,
    TrainingError,
    TripletBatch,
    batch_loss,
    build_model,
    embed,
    train,
)

logger = logging.getLogger(__name__)

#: Batch losses above this value abort defensive training
DIVERGENCE_THRESHOLD = 1e6
#: Inner attack strength of the defense on MNIST-scale data
DEFAULT_DEFENSE_EPSILON = 0.3


class DivergenceError(TrainingError):
    """Defensive training blew up; the message starts with ``DIVERGED``."""


class Variant(str, enum.Enum):
    SHIFT_REPLACE = "shift-replace"
    TRIP_ES = "trip-es"


@dataclass(frozen=True)
class DefenseConfig:
    """Inner attack and outer training of a hardened model.

    ``budget`` is the strongest adversary used for the whole run; its
    step and iteration count follow the attack-time defaults.
    """

    budget: PerturbationBudget = field(default_factory=lambda: PerturbationBudget(DEFAULT_DEFENSE_EPSILON))
    base: TrainConfig = field(default_factory=TrainConfig)
    variant: Variant = Variant.SHIFT_REPLACE
    trip_es_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.trip_es_weight < 0:
            raise ValueError("trip_es_weight must be non-negative")

    def describe(self) -> dict:
        return {"defense": self.variant.value, "inner_epsilon": self.budget.epsilon}


def _check_divergence(loss: float, where: str) -> None:
    if not np.isfinite(loss) or loss > DIVERGENCE_THRESHOLD:
        raise DivergenceError(
            "DIVERGED: {} loss reached {!r} (threshold {:g})".format(where, loss, DIVERGENCE_THRESHOLD)
        )


def shift_examples(
    model: EmbeddingModel,
    images: np.ndarray,
    cfg: DefenseConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """Max-shift adversarial counterparts of ``images`` under frozen parameters.

    Returns:
        The perturbed images and a mask of the rows whose shift is finite.
    """

    adversarial, _, shifts = max_shift_attack(
        images, model, cfg.budget, cfg.base.metric, seed=cfg.base.seed
    )
    usable = np.isfinite(shifts) & np.all(np.isfinite(adversarial), axis=1)
    return adversarial, usable


def _replace(model: EmbeddingModel, groups: Tuple[np.ndarray, ...], cfg: DefenseConfig):
    """Perturb the image groups of one batch together and drop unusable samples."""

    size = groups[0].shape[0]
    adversarial, usable = shift_examples(model, np.concatenate(groups), cfg)
    keep = np.logical_and.reduce(np.split(usable, len(groups)))
    if not np.all(keep):
        logger.warning("Skipping %d of %d samples with a non-finite inner shift", size - keep.sum(), size)
    if not np.any(keep):
        raise TrainingError("Every sample of the batch has a non-finite inner shift")
    return tuple(part[keep] for part in np.split(adversarial, len(groups))), keep


def _outer_step(model: EmbeddingModel, batch: Batch, clean: Batch, cfg: DefenseConfig) -> StepResult:
    params = model.trainable()
    with T.Tape() as tape:
        loss = batch_loss(model, batch, cfg.base, params)
        tape.backward(loss)
    value = loss.item()
    _check_divergence(value, "defensive")
    clean_loss = batch_loss(model, clean, cfg.base).item()
    return StepResult(value, {name: p.grad for name, p in params.items()}, clean_loss)


def defensive_triplet_step(
    model: EmbeddingModel,
    q: np.ndarray,
    c_p: np.ndarray,
    c_n: np.ndarray,
    cfg: DefenseConfig,
) -> StepResult:
    """Triplet loss on the max-shift replacements of anchor, positive and negative."""

    (aq, ap, an), keep = _replace(model, (q, c_p, c_n), cfg)
    clean = TripletBatch(q[keep], c_p[keep], c_n[keep])
    return _outer_step(model, TripletBatch(aq, ap, an), clean, cfg)


def defensive_contrastive_step(
    model: EmbeddingModel,
    left: np.ndarray,
    right: np.ndarray,
    same: np.ndarray,
    cfg: DefenseConfig,
) -> StepResult:
    """Contrastive loss with both sides of every pair replaced."""

    (al, ar), keep = _replace(model, (left, right), cfg)
    same = np.asarray(same)
    clean = PairBatch(left[keep], right[keep], same[keep])
    return _outer_step(model, PairBatch(al, ar, same[keep]), clean, cfg)


def _shift_penalty(model, clean: np.ndarray, adversarial: np.ndarray, params, metric) -> T.Tensor:
    moved = embed(model, adversarial, params)
    origin = embed(model, clean, params)
    return T.reduce_mean(row_distance(moved, origin, metric))


def trip_es_step(model: EmbeddingModel, batch: Batch, cfg: DefenseConfig) -> StepResult:
    """Clean metric loss plus the weighted mean max-shift distance of every image.

    Raises:
        DivergenceError: The loss is non-finite or exceeds
            :data:`DIVERGENCE_THRESHOLD`. Euclidean models are prone to it.
    """

    groups = tuple(np.asarray(part) for part in (batch[:3] if isinstance(batch, TripletBatch) else batch[:2]))
    adversarial, usable = shift_examples(model, np.concatenate(groups), cfg)
    if not np.all(usable):
        logger.warning("Ignoring %d images with a non-finite inner shift", (~usable).sum())
    clean_images = np.concatenate(groups)[usable]
    adversarial = adversarial[usable]

    params = model.trainable()
    with T.Tape() as tape:
        clean_loss = batch_loss(model, batch, cfg.base, params)
        loss = clean_loss
        if clean_images.shape[0] and cfg.trip_es_weight > 0:
            penalty = _shift_penalty(model, clean_images, adversarial, params, cfg.base.metric)
            loss = T.add(loss, T.mul(penalty, cfg.trip_es_weight))
        value = loss.item()
        _check_divergence(value, "trip-es")
        tape.backward(loss)
    return StepResult(value, {name: p.grad for name, p in params.items()}, clean_loss.item())


def defensive_step(model: EmbeddingModel, batch: Batch, cfg: TrainConfig, defense: DefenseConfig) -> StepResult:
    """Training step of ``defense`` with the signature :func:`~advranking.ranker.train` expects.

    ``cfg`` is the configuration ``train`` runs with, normally ``defense.base``.
    """

    if cfg != defense.base:
        defense = DefenseConfig(defense.budget, cfg, defense.variant, defense.trip_es_weight)
    if defense.variant is Variant.TRIP_ES:
        return trip_es_step(model, batch, defense)
    if isinstance(batch, TripletBatch):
        return defensive_triplet_step(model, *batch, defense)
    return defensive_contrastive_step(model, *batch, defense)


def harden(
    dataset,
    cfg: DefenseConfig,
    arch: str = "mlp",
    model: Optional[EmbeddingModel] = None,
) -> Tuple[EmbeddingModel, TrainHistory]:
    """Train a defensive model from scratch (or from ``model``).

    The result carries ``defense`` and ``inner_epsilon`` metadata so that
    checkpoints and tables can tell it from its vanilla twin.
    """

    if model is None:
        model = build_model(arch, dataset.images.shape[1], seed=cfg.base.seed)
    logger.info(
        "Hardening %s model with %s at epsilon %g", model.arch, cfg.variant.value, cfg.budget.epsilon
    )
    trained, history = train(model, dataset, cfg.base, step=partial(defensive_step, defense=cfg))
    return trained.with_meta(**cfg.describe()), history
