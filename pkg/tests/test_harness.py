"""Tests for experiment protocols, result tables and their rendering"""

import numpy as np
import pytest

from advranking.attacks import AttackKind
from advranking.datasets import SyntheticSpec, make_synthetic
from advranking.experiments.harness import (
    UNIVERSAL_MIN_TARGETS,
    CellResult,
    ExperimentError,
    ExperimentPlan,
    ModelRef,
    ResultKey,
    ResultTable,
    derive_rng,
    run_attack_sweep,
    run_transfer,
    run_universal,
    run_xi_search,
    split_universal,
    transfer_label,
    xi_label,
)
from advranking.experiments.models import Checkpoint, Experiment
from advranking.experiments.report import ERROR_MARK, ReportError, emit_report, render_csv, render_text
from advranking.ranker import TrainConfig, build_model, train

GOLDEN_CSV = (
    "model,kind,epsilon,wm,rank_before,rank_after,sp_before,sp_after,shift\n"
    "AT,MaxShift,0.03,0,,,,,0.2500\n"
    "CT,CA+,0.3,1,50.0,2.1,,,\n"
    "CT,QA+,0.1,2,ERR,ERR,ERR,ERR,ERR\n"
    "CT,QA+,0.3,2,40.0,10.0,0.5,1.5,0.0625\n"
)


def handmade_table():
    return ResultTable().extend([
        CellResult(ResultKey("CT", AttackKind.QA_PLUS, 0.3, 2), 0.4, 0.1, 0.005, 0.015, 0.0625),
        CellResult(ResultKey("CT", AttackKind.QA_PLUS, 0.1, 2), error="DatasetError: pool too small"),
        CellResult(ResultKey("CT", AttackKind.CA_PLUS, 0.3, 1), 0.5, 0.021),
        CellResult(ResultKey("AT", AttackKind.MAX_SHIFT, 0.03, 0), shift=0.25),
    ])


def sweep_plan(model, **kwargs):
    options = dict(
        models=(ModelRef("CT", model),),
        kinds=("CA+",),
        epsilon_grid=(0.1,),
        wm_grid=(1,),
        trials=3,
        corpus_size=None,
        pool_size=32,
    )
    options.update(kwargs)
    return ExperimentPlan(**options)


@pytest.fixture(scope="module")
def other_model(small_model, train_set):
    """Second model of the same data trained from another seed"""

    model, _ = train(small_model, train_set, TrainConfig(epochs=2, steps_per_epoch=20, batch=16, lr=0.05, seed=5))
    return model


@pytest.mark.parametrize(
    "options",
    [
        {"models": ()},
        {"epsilon_grid": (0.1, 1.5)},
        {"wm_grid": (0,)},
        {"trials": 0},
        {"jobs": 0},
        {"kinds": ()},
    ],
    ids=["no-models", "epsilon-range", "wm", "trials", "jobs", "no-kinds"],
)
def test_plan_validation(trained_model, options):
    with pytest.raises(ExperimentError):
        sweep_plan(trained_model, **options)


def test_plan_rejects_duplicate_labels(trained_model):
    with pytest.raises(ExperimentError, match="unique"):
        sweep_plan(trained_model, models=(ModelRef("CT", trained_model), ModelRef("CT", trained_model)))


def test_plan_cells(trained_model):
    """MaxShift has a single w/m column, universal kinds no sweep cells"""

    plan = sweep_plan(trained_model, kinds=("CA+", "MaxShift"), epsilon_grid=(0.1, 0.3), wm_grid=(1, 2))

    keys = list(plan.cells())

    assert len(keys) == 6
    assert {key.wm for key in keys if key.kind is AttackKind.MAX_SHIFT} == {0}
    with pytest.raises(ExperimentError):
        list(sweep_plan(trained_model, kinds=("I-CA+",)).cells())
    with pytest.raises(ExperimentError):
        plan.model("EC")


def test_derive_rng_is_stable():
    first = derive_rng(0, "CT", "CA+", 1).integers(1 << 30, size=4)
    again = derive_rng(0, "CT", "CA+", 1).integers(1 << 30, size=4)
    other = derive_rng(0, "CT", "CA+", 2).integers(1 << 30, size=4)

    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, other)


def test_result_table_orders_by_key():
    table = handmade_table()

    assert [cell.key.model for cell in table.rows()] == ["AT", "CT", "CT", "CT"]
    assert [cell.key.epsilon for cell in table.rows()[2:]] == [0.1, 0.3]
    assert len(table.errors) == 1
    assert table["CT", "CA+", 0.3, 1].rank_after == 0.021
    with pytest.raises(ExperimentError):
        table.add(CellResult(ResultKey("AT", AttackKind.MAX_SHIFT, 0.03, 0)))


def test_render_csv_golden():
    assert render_csv(handmade_table()) == GOLDEN_CSV


def test_render_text_pivots_models():
    text = render_text(handmade_table())

    assert text.startswith("AT\n")
    assert "shift 0.2500" in text
    assert "50.0->2.1" in text
    assert ERROR_MARK in text
    assert render_text(ResultTable()) == "(no results)\n"


def test_emit_report(tmp_path):
    path = tmp_path / "results.csv"

    content = emit_report(handmade_table(), path)

    assert path.read_text(encoding="utf-8") == content == GOLDEN_CSV
    with pytest.raises(ReportError):
        emit_report(handmade_table(), fmt="xlsx")
    with pytest.raises(ReportError):
        emit_report(handmade_table(), tmp_path / "missing" / "results.csv")


def test_sweep_is_deterministic(trained_model, test_set):
    """Same seed and plan give byte-identical tables"""

    plan = sweep_plan(trained_model, kinds=("CA+", "QA-", "MaxShift"), wm_grid=(1,))

    first = run_attack_sweep(plan, test_set)
    second = run_attack_sweep(plan, test_set)

    assert render_csv(first) == render_csv(second)
    assert len(first) == 3
    assert not first.errors
    assert first["CT", "MaxShift", 0.1, 0].shift > 0
    assert first["CT", "QA-", 0.1, 1].sp_before is not None


def test_failing_cell_becomes_error_row(trained_model, test_set):
    """Lowering kinds need w/m members in the top pool, 150 items only hold one"""

    plan = sweep_plan(trained_model, kinds=("CA+", "CA-"), wm_grid=(1, 2))

    table = run_attack_sweep(plan, test_set)

    assert len(table) == 4
    assert [cell.key for cell in table.errors] == [ResultKey("CT", AttackKind.CA_MINUS, 0.1, 2)]
    assert "CT,CA-,0.1,2,ERR,ERR,ERR,ERR,ERR\n" in render_csv(table)
    assert table["CT", "CA-", 0.1, 1].rank_before is not None


def test_sweep_dumps_adversarial_images(trained_model, test_set, tmp_path):
    plan = sweep_plan(trained_model, dump_dir=tmp_path)

    run_attack_sweep(plan, test_set)

    assert [path.name for path in tmp_path.iterdir()] == ["CT_CA+_0.1_1-images-idx3-ubyte"]


def test_transfer_diagonal_matches_sweep(trained_model, other_model, test_set):
    """A model attacking itself reproduces the white-box sweep cell"""

    plan = sweep_plan(trained_model, kinds=("CA+", "QA+"))
    source, target = ModelRef("CT", trained_model), ModelRef("CT2", other_model)

    table = run_transfer([source], [source, target], plan, test_set)
    sweep = run_attack_sweep(plan, test_set)

    assert sorted({cell.key.model for cell in table.rows()}) == [transfer_label("CT", "CT"), "CT->CT2"]
    for kind in ("CA+", "QA+"):
        diagonal, white_box = table["CT->CT", kind, 0.1, 1], sweep["CT", kind, 0.1, 1]
        assert (diagonal.rank_before, diagonal.rank_after) == (white_box.rank_before, white_box.rank_after)
        assert diagonal.sp_after == white_box.sp_after
        assert table["CT->CT2", kind, 0.1, 1].rank_after is not None


def test_transfer_validation(trained_model, test_set):
    ref = ModelRef("CT", trained_model)
    wide = ModelRef("WIDE", build_model("small", 32, widths=(4,)))

    with pytest.raises(ExperimentError, match="two distinct"):
        run_transfer([ref], [ref], sweep_plan(trained_model), test_set)
    with pytest.raises(ExperimentError, match="input dimension"):
        run_transfer([ref], [wide], sweep_plan(trained_model), test_set)
    with pytest.raises(ExperimentError):
        run_transfer([ref], [ModelRef("B", trained_model)], sweep_plan(trained_model, kinds=("MaxShift",)), test_set)


def test_split_universal_is_disjoint(rng):
    seen, unseen = split_universal(1000, 0.05, rng)

    assert len(seen) == len(unseen) == 50
    assert not set(seen.tolist()) & set(unseen.tolist())
    with pytest.raises(ExperimentError):
        split_universal(20 * UNIVERSAL_MIN_TARGETS - 1, 0.05, rng)
    with pytest.raises(ExperimentError):
        split_universal(100, 0.6, rng)


def test_universal_protocol(trained_model):
    """One perturbation, crafted on seen targets, evaluated on both halves"""

    corpus = make_synthetic(SyntheticSpec(n_classes=4, points_per_class=200, dim=16, seed=0), "test")
    ref = ModelRef("CT", trained_model)
    plan = sweep_plan(trained_model, trials=8)

    result = run_universal(ref, "I-CA+", 0.1, 1, plan, corpus)

    assert sorted(cell.key.model for cell in result.table.rows()) == ["CT/seen", "CT/unseen"]
    assert not np.intersect1d(result.seen, result.unseen).size
    assert np.max(np.abs(result.perturbation)) <= 0.1 + 1e-6
    for cell in result.table.rows():
        assert cell.rank_before is not None and cell.shift is not None
    with pytest.raises(ExperimentError):
        run_universal(ref, "CA+", 0.1, 1, plan, corpus)


def test_universal_needs_enough_targets(trained_model, test_set):
    with pytest.raises(ExperimentError):
        run_universal(ModelRef("CT", trained_model), "I-QA+", 0.1, 1, sweep_plan(trained_model), test_set)


def test_xi_search_attacks_same_items(trained_model, test_set):
    plan = sweep_plan(trained_model, kinds=("QA+",), trials=2)

    table = run_xi_search(plan, test_set, [0.0, 1.0])

    assert [cell.key.model for cell in table.rows()] == [xi_label("CT", 0.0), xi_label("CT", 1.0)]
    assert table["CT/xi=0", "QA+", 0.1, 1].rank_before == table["CT/xi=1", "QA+", 0.1, 1].rank_before


@pytest.mark.parametrize("grid", [[], [1.0, 0.5], [-1.0, 0.0]], ids=["empty", "descending", "negative"])
def test_xi_grid_validation(trained_model, test_set, grid):
    with pytest.raises(ExperimentError):
        run_xi_search(sweep_plan(trained_model, kinds=("QA+",)), test_set, grid)


def test_xi_search_needs_query_attacks(trained_model, test_set):
    with pytest.raises(ExperimentError):
        run_xi_search(sweep_plan(trained_model, kinds=("CA+",)), test_set, [0.0])


@pytest.mark.django_db
def test_experiment_round_trip():
    table = handmade_table()

    experiment = Experiment.record("sweep", table, seed=3, corpus_size=150, trials=10)

    assert render_csv(experiment.table()) == GOLDEN_CSV
    assert experiment.has_errors
    assert Experiment.objects.first() == experiment


@pytest.mark.django_db
def test_fixture_experiment():
    experiment = Experiment.objects.get(pk=1)

    assert not experiment.has_errors
    assert experiment.table()["ct-fixture", "QA+", 0.3, 1].sp_after == 0.02
    assert "ct-fixture,MaxShift,0.3,0,,,,,0.8123\n" in render_csv(experiment.table())


@pytest.mark.django_db
def test_checkpoint_ledger(trained_model, tmp_path):
    assert Checkpoint.objects.get(name="ct-fixture-defended").tag == "CTD"

    checkpoint = Checkpoint.register("ct-new", tmp_path / "ct.ckpt", trained_model, dataset="synthetic")

    assert checkpoint.tag == "CT"
    assert checkpoint.loss_kind == "triplet"
    assert Checkpoint.register("ct-new", tmp_path / "ct.ckpt", trained_model, recall_at_1=0.9).pk == checkpoint.pk
