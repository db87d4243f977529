"""Tests for shift-distance adversarial training"""

import numpy as np
import pytest

from advranking.attacks import PerturbationBudget, max_shift_attack
from advranking.defense import (
    DefenseConfig,
    DivergenceError,
    Variant,
    defensive_step,
    harden,
    shift_examples,
    trip_es_step,
)
from advranking.ranker import LabelSampler, PairBatch, TrainConfig, TrainingError, TripletBatch, build_model, train

BASE = TrainConfig(epochs=2, steps_per_epoch=8, batch=8, lr=0.05, seed=3)


def assert_same_params(first, second):
    assert first.params.keys() == second.params.keys()
    for name in first.params:
        np.testing.assert_array_equal(first.params[name], second.params[name])


def test_defense_config_validation():
    with pytest.raises(ValueError):
        DefenseConfig(trip_es_weight=-1.0)
    with pytest.raises(ValueError):
        DefenseConfig(variant="ensemble")
    assert DefenseConfig().describe() == {"defense": "shift-replace", "inner_epsilon": 0.3}


def test_zero_epsilon_defense_is_plain_training(small_model, train_set):
    """With a collapsed ball the defense trains exactly like the vanilla loop"""

    defended, defended_history = harden(
        train_set, DefenseConfig(budget=PerturbationBudget(0.0), base=BASE), model=small_model
    )
    plain, plain_history = train(small_model, train_set, BASE)

    assert_same_params(defended, plain)
    assert defended_history.losses == plain_history.losses
    assert defended.meta["defense"] == "shift-replace"
    assert defended.meta["inner_epsilon"] == 0.0


def test_unweighted_trip_es_is_plain_training(small_model, train_set):
    cfg = DefenseConfig(budget=PerturbationBudget(0.1), base=BASE, variant=Variant.TRIP_ES, trip_es_weight=0.0)

    defended, _ = harden(train_set, cfg, model=small_model)
    plain, _ = train(small_model, train_set, BASE)

    assert_same_params(defended, plain)


@pytest.mark.parametrize("variant", list(Variant))
@pytest.mark.parametrize("loss_kind", ["triplet", "contrastive"])
def test_defense_is_reproducible(small_model, train_set, variant, loss_kind):
    """The same seed gives the same hardened model"""

    base = TrainConfig(loss_kind=loss_kind, epochs=1, steps_per_epoch=4, batch=8, lr=0.05, seed=1)
    cfg = DefenseConfig(budget=PerturbationBudget(0.1), base=base, variant=variant)

    first, history = harden(train_set, cfg, model=small_model)
    second, _ = harden(train_set, cfg, model=small_model)

    assert_same_params(first, second)
    assert first.tag.endswith("D")
    assert history.epochs[0].clean_loss is not None


def test_harden_builds_model_from_scratch(train_set):
    cfg = DefenseConfig(budget=PerturbationBudget(0.05), base=TrainConfig(epochs=1, steps_per_epoch=2, batch=4))

    model, history = harden(train_set, cfg, arch="mlp")

    assert model.input_dim == train_set.input_dim
    assert model.arch == "mlp"
    assert len(history) == 1


def test_shift_examples_stay_in_budget(trained_model, test_set):
    cfg = DefenseConfig(budget=PerturbationBudget(0.1), base=TrainConfig())
    images = test_set.images[:5]

    adversarial, usable = shift_examples(trained_model, images, cfg)

    assert usable.all()
    assert np.all(np.abs(adversarial - images) <= 0.1 + 1e-6)


def test_defensive_step_follows_training_config(small_model, train_set):
    """The configuration passed by the loop wins over the stored one"""

    images = train_set.images[:4]
    batch = PairBatch(images, images[::-1], np.array([True, False, True, False]))
    contrastive = TrainConfig(loss_kind="contrastive", metric="euclidean")

    result = defensive_step(small_model, batch, contrastive, DefenseConfig(budget=PerturbationBudget(0.0)))

    assert result.clean_loss == pytest.approx(result.loss)
    assert set(result.grads) == set(small_model.params)


def test_euclidean_blowup_raises_divergence(train_set):
    """Huge Euclidean embeddings abort defensive training with DIVERGED"""

    model = build_model("small", train_set.input_dim, seed=0, widths=(24, 8), meta={"metric": "euclidean"})
    model = model.with_params({name: value * 1e3 for name, value in model.params.items()})
    base = TrainConfig(loss_kind="contrastive", metric="euclidean", epochs=1, steps_per_epoch=1, batch=16)

    with pytest.raises(DivergenceError, match="^DIVERGED"):
        harden(train_set, DefenseConfig(budget=PerturbationBudget(0.3), base=base), model=model)

    assert issubclass(DivergenceError, TrainingError)


def test_trip_es_blowup_raises_divergence(train_set):
    """The shift penalty of a Euclidean model with huge weights aborts the step"""

    model = build_model("small", train_set.input_dim, seed=0, widths=(24, 8), meta={"metric": "euclidean"})
    model = model.with_params({name: value * 1e4 for name, value in model.params.items()})
    cfg = DefenseConfig(
        budget=PerturbationBudget(0.3), base=TrainConfig(metric="euclidean"), variant=Variant.TRIP_ES, trip_es_weight=1.0
    )
    images = train_set.images
    batch = TripletBatch(images[:4], images[4:8], images[8:12])

    with pytest.raises(DivergenceError, match="^DIVERGED"):
        trip_es_step(model, batch, cfg)


def test_shift_replacement_raises_the_batch_loss(trained_model, train_set):
    """Training on max-shift examples sees a loss at least the clean one in most batches"""

    base = TrainConfig(batch=16, seed=0)
    defense = DefenseConfig(budget=PerturbationBudget(0.3), base=base)
    sampler = LabelSampler(train_set.labels)
    rng = np.random.default_rng(0)

    batches = [sampler.batch(train_set.images, base, rng) for _ in range(20)]

    results = [defensive_step(trained_model, batch, base, defense) for batch in batches]

    assert all(result.clean_loss is not None for result in results)
    assert np.mean([result.loss >= result.clean_loss for result in results]) >= 0.8


def test_trip_es_reduces_attainable_shift(small_model, train_set, test_set):
    """Penalizing the shift leaves less room to the max-shift attack"""

    base = TrainConfig(epochs=3, steps_per_epoch=20, batch=16, lr=0.05, seed=0)
    vanilla, _ = train(small_model, train_set, base)
    hardened, _ = harden(
        train_set,
        DefenseConfig(budget=PerturbationBudget(0.1), base=base, variant=Variant.TRIP_ES, trip_es_weight=5.0),
        model=small_model,
    )

    budget = PerturbationBudget(0.1)
    _, _, vanilla_shift = max_shift_attack(test_set.images[:20], vanilla, budget)
    _, _, hardened_shift = max_shift_attack(test_set.images[:20], hardened, budget)

    assert hardened_shift.mean() < vanilla_shift.mean()
