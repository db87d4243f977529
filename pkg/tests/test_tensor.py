"""Tests for the gradient tape and its primitives"""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advranking import tensor as T
from advranking.attacks import candidate_hinge_terms, loss_ca_plus, loss_qa_minus
from advranking.metrics import RankingIndex, row_distance
from advranking.ranker import PairBatch, TrainConfig, TripletBatch, batch_loss, build_model, embed, embed_array

FLOATS = st.floats(-2, 2, width=32)
UNIT = st.floats(-1, 1, width=32)
AWAY_FROM_ZERO = st.floats(0.1, 2, width=32) | st.floats(-2, -0.1, width=32)
SEEDS = st.integers(0, 2**32 - 1)
#: Finite-difference step and tolerances of the composed losses
STEP, RTOL, ATOL = 5e-3, 1e-2, 2e-3


def analytic_grad(build, x):
    """Gradient of the scalar ``build(tensor)`` with respect to ``x``"""

    tensor = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        loss = build(tensor)
    tape.backward(loss)
    return tensor.grad.astype(np.float64)


def numeric_grad(build, x, h=1e-2):
    """Central differences over the float32 representable step"""

    x = np.asarray(x, dtype=np.float32)
    grad = np.zeros(x.shape, dtype=np.float64)
    for position in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[position] += h
        xm[position] -= h
        step = float(xp[position]) - float(xm[position])
        grad[position] = (float(build(T.Tensor(xp)).item()) - float(build(T.Tensor(xm)).item())) / step
    return grad


def assert_gradient(build, x, atol=5e-4, rtol=1e-3, h=1e-2):
    np.testing.assert_allclose(analytic_grad(build, x), numeric_grad(build, x, h), rtol=rtol, atol=atol)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (3, 4), elements=FLOATS), arrays(np.float32, (4,), elements=FLOATS))
def test_broadcast_arithmetic_gradient(a, b):
    """Gradients of add, sub and mul flow back through broadcasting"""

    assert_gradient(lambda t: T.mul(T.add(t, b), T.sub(t, b)).sum(), a)
    assert_gradient(lambda t: T.mul(T.add(a, t), T.sub(a, t)).sum(), b)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (2, 3), elements=FLOATS), arrays(np.float32, (2, 3), elements=st.floats(1, 2, width=32)))
def test_div_gradient(a, b):
    """Quotient gradients match finite differences on both operands"""

    assert_gradient(lambda t: T.div(t, b).sum(), a)
    assert_gradient(lambda t: T.div(a, t).sum(), b, atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (3, 4), elements=UNIT), arrays(np.float32, (4, 2), elements=UNIT))
def test_matmul_gradient(a, b):
    """Matrix product gradients of both factors"""

    assert_gradient(lambda t: T.mul(T.matmul(t, b), T.matmul(t, b)).mean(), a, atol=1e-3)
    assert_gradient(lambda t: T.mul(T.matmul(a, t), T.matmul(a, t)).mean(), b, atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (3, 5), elements=AWAY_FROM_ZERO))
def test_norm_and_relu_gradient(a):
    """Row norms and rectifiers away from their kinks"""

    assert_gradient(lambda t: T.l2_norm_rows(t).sum(), a, atol=1e-3)
    assert_gradient(lambda t: T.mul(T.relu(t), t).sum(), a)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (4, 3), elements=AWAY_FROM_ZERO), arrays(np.float32, (3,), elements=AWAY_FROM_ZERO))
def test_dot_rows_gradient(a, b):
    assert_gradient(lambda t: T.dot_rows(t, b).sum(), a, atol=1e-3)
    assert_gradient(lambda t: T.dot_rows(a, t).sum(), b, atol=1e-3)


def test_relu_derivative_at_zero_is_zero():
    """The rectifier does not pass gradient at exactly zero"""

    grad = analytic_grad(lambda t: T.relu(t).sum(), np.array([-1.0, 0.0, 1.0]))

    np.testing.assert_array_equal(grad, [0.0, 0.0, 1.0])


def test_zero_row_norm_has_zero_gradient():
    grad = analytic_grad(lambda t: T.l2_norm_rows(t).sum(), np.zeros((2, 3)))

    np.testing.assert_array_equal(grad, np.zeros((2, 3)))


def test_clamp_blocks_gradient_on_bounds():
    grad = analytic_grad(lambda t: T.clamp(t, lo=0.0, hi=1.0).sum(), np.array([-0.5, 0.0, 0.5, 1.0, 1.5]))

    np.testing.assert_array_equal(grad, [0.0, 0.0, 1.0, 0.0, 0.0])


def test_take_rows_accumulates_repeated_rows():
    """Repeated selection sums the gradient of the selected row"""

    grad = analytic_grad(lambda t: T.take_rows(t, [0, 0, 2]).sum(), np.ones((3, 2)))

    np.testing.assert_array_equal(grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_reductions_over_axis():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)

    assert T.reduce_sum(x, axis=1).data.tolist() == [3.0, 12.0]
    assert T.reduce_mean(x, axis=0, keepdims=True).shape == (1, 3)
    np.testing.assert_allclose(
        analytic_grad(lambda t: T.reduce_mean(t, axis=0).sum(), x), np.full((2, 3), 0.5)
    )


def test_unused_input_gets_zero_gradient():
    """Every tracked tensor receives a gradient, zero when unused"""

    used = T.Tensor([1.0, 2.0], requires_grad=True)
    unused = T.Tensor([3.0, 4.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.add(T.mul(used, used).sum(), T.mul(unused, 0.0).sum())
    tape.backward(loss)

    np.testing.assert_array_equal(used.grad, [2.0, 4.0])
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_storage_is_float32():
    out = T.add(T.Tensor(np.arange(3, dtype=np.float64)), 1)

    assert out.data.dtype == np.float32
    assert T.matmul(np.ones((2, 2)), np.ones((2, 1))).data.dtype == np.float32


def test_operations_outside_tape_are_untracked():
    """Without an active tape nothing is recorded"""

    x = T.Tensor([1.0], requires_grad=True)
    out = T.mul(x, 3.0)

    assert not out.requires_grad
    with pytest.raises(T.TapeError):
        T.backward(out)


def test_nested_tapes_record_innermost():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as outer:
        with T.Tape() as inner:
            loss = T.mul(x, x).sum()
        assert T.active_tape() is outer

    assert not outer.nodes
    inner.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_needs_scalar_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        out = T.mul(x, 2.0)

    with pytest.raises(T.TapeError):
        tape.backward(out)


def test_tape_serves_one_backward_pass():
    x = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.mul(x, x).sum()
    tape.backward(loss)

    with pytest.raises(T.TapeError):
        tape.backward(loss)


def test_shape_errors_are_value_errors():
    """Shape mismatches report the operation and both shapes"""

    with pytest.raises(T.ShapeError) as excinfo:
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    assert isinstance(excinfo.value, ValueError)
    assert excinfo.value.op == "matmul"
    assert excinfo.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(T.ShapeError):
        T.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(T.ShapeError):
        T.take_rows(np.ones((2, 3)), [5])


# Composed losses


def smooth_model(seed, metric, dims=(6, 5, 3)):
    """Two-layer model whose hidden units sit well away from the rectifier kink"""

    rng = np.random.default_rng(seed)
    model = build_model("small", dims[0], seed=seed, widths=dims[1:], meta={"metric": metric})
    sign = rng.choice([-1.0, 1.0], size=dims[1], p=[0.3, 0.7])
    return model.with_params(
        {
            **model.params,
            "0.weight": rng.uniform(-1.0, 1.0, (dims[0], dims[1])),
            "0.bias": sign * rng.uniform(2.0, 3.0, dims[1]),
        }
    )


def clear_of_relu(model, images, gap=0.05):
    hidden = np.asarray(images, dtype=np.float64) @ model.params["0.weight"] + model.params["0.bias"]
    return bool(np.all(np.abs(hidden) > gap))


def pair_distance(model, left, right, metric):
    return row_distance(embed(model, left), embed(model, right), metric).data.astype(np.float64)


@pytest.mark.parametrize(
    "loss_kind, metric", [("triplet", "euclidean"), ("triplet", "cosine"), ("contrastive", "euclidean")]
)
@settings(max_examples=50, deadline=None)
@given(seed=SEEDS)
def test_batch_loss_weight_gradient(loss_kind, metric, seed):
    """Metric-learning loss through a two-layer model, with respect to every parameter"""

    model = smooth_model(seed, metric)
    images = np.random.default_rng([seed, 1]).random((3, 4, 6)).astype(np.float32)
    cfg = TrainConfig(loss_kind=loss_kind, metric=metric)
    assume(clear_of_relu(model, images.reshape(-1, 6)))

    if loss_kind == "triplet":
        batch = TripletBatch(*images)
        dp = pair_distance(model, images[0], images[1], metric)
        dn = pair_distance(model, images[0], images[2], metric)
        hinges, distances = cfg.margin_beta + dp - dn, np.concatenate([dp, dn])
    else:
        same = np.array([True, False, True, False])
        batch = PairBatch(images[0], images[1], same)
        distances = pair_distance(model, images[0], images[1], metric)
        hinges = cfg.contrastive_margin - distances[~same]
    assume(np.all(np.abs(hinges) > 0.1))
    if metric == "euclidean":
        assume(np.all(distances > 0.3))
    else:
        assume(np.all(np.linalg.norm(embed_array(model, images.reshape(-1, 6)), axis=1) > 0.5))

    for name, value in model.params.items():

        def build(tensor, name=name):
            return batch_loss(model, batch, cfg, params={**model.params, name: tensor})

        assert_gradient(build, value, atol=ATOL, rtol=RTOL, h=STEP)


@settings(max_examples=50, deadline=None)
@given(seed=SEEDS)
def test_candidate_attack_image_gradient(seed):
    """CA+ loss with respect to the candidate image"""

    model = smooth_model(seed, "euclidean")
    rng = np.random.default_rng([seed, 2])
    index = RankingIndex(embed_array(model, rng.random((6, 6))), "euclidean")
    c_img = rng.random(6).astype(np.float32)
    queries, pool = [0, 1], [2, 3, 4, 5]
    assume(clear_of_relu(model, c_img[np.newaxis, :]))

    hinges = candidate_hinge_terms(c_img, queries, index, model, pool).data
    to_queries = index.distances_between(embed_array(model, c_img[np.newaxis, :])[0], index.embeddings[queries])
    assume(np.all(np.abs(hinges) > 0.05) and np.all(to_queries > 0.3))

    assert_gradient(lambda t: loss_ca_plus(t, queries, index, model, pool), c_img, atol=ATOL, rtol=RTOL, h=STEP)


@settings(max_examples=50, deadline=None)
@given(seed=SEEDS)
def test_query_attack_image_gradient(seed):
    """QA- loss with respect to the query image"""

    model = smooth_model(seed, "euclidean")
    rng = np.random.default_rng([seed, 3])
    index = RankingIndex(embed_array(model, rng.random((6, 6))), "euclidean")
    q_img = rng.random(6).astype(np.float32)
    candidates, pool = [0, 1], [2, 3, 4, 5]
    assume(clear_of_relu(model, q_img[np.newaxis, :]))

    distances = index.distances(embed_array(model, q_img[np.newaxis, :])[0])
    hinges = distances[candidates][:, np.newaxis] - distances[pool][np.newaxis, :]
    assume(np.all(np.abs(hinges) > 0.05) and np.all(distances > 0.3))

    assert_gradient(lambda t: loss_qa_minus(t, candidates, index, model, pool), q_img, atol=ATOL, rtol=RTOL, h=STEP)
