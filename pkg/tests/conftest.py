"""py.test global configuration"""

from pathlib import Path

import numpy as np
import pytest

from django.core.management import call_command

from advranking.datasets import SyntheticSpec, make_synthetic
from advranking.experiments.harness import corpus_index
from advranking.ranker import TrainConfig, build_model, train

EXAMPLE_DATA = Path(__file__).parents[1] / "example-data.yaml"

#: Three well separated clusters of 50 points in 16 dimensions
SYNTHETIC = SyntheticSpec(n_classes=3, points_per_class=50, dim=16, seed=0)


@pytest.fixture(scope="session")
def django_db_setup(django_db_setup, django_db_blocker):
    """Create testing database with example data."""

    with django_db_blocker.unblock():
        call_command("loaddata", str(EXAMPLE_DATA))


@pytest.fixture(scope="session")
def train_set():
    return make_synthetic(SYNTHETIC, "train")


@pytest.fixture(scope="session")
def test_set():
    return make_synthetic(SYNTHETIC, "test")


@pytest.fixture(scope="session")
def small_model():
    """Untrained two-layer cosine model for the synthetic data"""

    return build_model("small", SYNTHETIC.dim, seed=0, widths=(24, 8), meta={"metric": "cosine"})


@pytest.fixture(scope="session")
def trained_model(train_set, small_model):
    """Cosine triplet model fitted on the synthetic clusters"""

    cfg = TrainConfig(epochs=3, steps_per_epoch=30, batch=16, lr=0.05, seed=0)
    model, _ = train(small_model, train_set, cfg)
    return model


@pytest.fixture(scope="session")
def corpus(trained_model, test_set):
    return corpus_index(trained_model, test_set)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
