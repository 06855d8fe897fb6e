import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import check_gradients
from varformer import autodiff as ad
from varformer.autodiff import Tensor
from varformer.errors import ContractError, DomainError, ShapeError


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity_returns_input(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 3)))
    eye = Tensor(np.eye(3))
    out = ad.matmul(a, eye)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.uniform(-2, 2, (2, 3)))
    b = Tensor(rng.uniform(-2, 2, (3, 4)))
    check_gradients(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], tol=1e-5)


def test_matmul_shape_mismatch_names_both_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)


# ---------------------------------------------------------------------------
# softmax


def test_softmax_uniform_inputs():
    x = Tensor(np.full((1, 5), 3.7))
    out = ad.softmax(x)
    np.testing.assert_allclose(out.data, 0.2, rtol=0, atol=1e-15)


def test_softmax_saturation():
    x = Tensor(np.array([[0.0, 60.0]]))
    out = ad.softmax(x)
    assert abs(out.data[0, 0] - 0.0) < 1e-20
    assert abs(out.data[0, 1] - 1.0) < 1e-20


def test_softmax_rows_sum_to_one(rng):
    for _ in range(25):
        x = Tensor(rng.uniform(-50, 50, (4, 7)))
        sums = ad.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, rtol=0, atol=1e-12)


def test_softmax_gradient_matches_finite_differences(rng):
    x = Tensor(rng.uniform(-2, 2, (3, 4)))
    c = ad.constant(rng.uniform(-1, 1, (3, 4)))
    check_gradients(lambda: ad.sum_all(ad.mul(ad.softmax(x), c)), [x], tol=1e-5)


def test_log_softmax_agrees_with_log_of_softmax(rng):
    x = Tensor(rng.uniform(-3, 3, (3, 5)))
    np.testing.assert_allclose(
        ad.log_softmax(x).data, np.log(ad.softmax(x).data), atol=1e-12
    )
    c = ad.constant(rng.uniform(-1, 1, (3, 5)))
    check_gradients(lambda: ad.sum_all(ad.mul(ad.log_softmax(x), c)), [x], tol=1e-5)


# ---------------------------------------------------------------------------
# elementwise ops


def test_softplus_at_zero():
    out = ad.softplus(Tensor(np.array(0.0)))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_relu_values():
    out = ad.relu(Tensor(np.array([-1.0, 2.0])))
    np.testing.assert_array_equal(out.data, [0.0, 2.0])


def test_log_domain_error_names_op():
    with pytest.raises(DomainError, match="log"):
        ad.log(Tensor(np.array([1.0, -0.5])))


def test_sqrt_domain_error_names_op():
    with pytest.raises(DomainError, match="sqrt"):
        ad.sqrt(Tensor(np.array([-1.0])))


@pytest.mark.parametrize(
    "op,low,high",
    [
        (ad.relu, 0.05, 2.0),
        (ad.softplus, -2.0, 2.0),
        (ad.log, 0.1, 2.0),
        (ad.exp, -2.0, 2.0),
        (ad.sqrt, 0.1, 2.0),
    ],
)
def test_unary_op_gradients_match_finite_differences(op, low, high, rng):
    x = Tensor(rng.uniform(low, high, (3, 4)))
    c = ad.constant(rng.uniform(-1, 1, (3, 4)))
    check_gradients(lambda: ad.sum_all(ad.mul(op(x), c)), [x], tol=1e-5)


def test_binary_op_gradients_match_finite_differences(rng):
    a = Tensor(rng.uniform(-2, 2, (2, 3)))
    b = Tensor(rng.uniform(-2, 2, (2, 3)))
    for op in (ad.add, ad.sub, ad.mul):
        check_gradients(lambda op=op: ad.sum_all(op(a, b)), [a, b], tol=1e-5)


def test_elementwise_shape_mismatch_is_error():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 2)))
    for op in (ad.add, ad.sub, ad.mul):
        with pytest.raises(ShapeError):
            op(a, b)


def test_scale_and_add_const(rng):
    x = Tensor(rng.uniform(-2, 2, (2, 2)))
    np.testing.assert_array_equal(ad.scale(x, 2.0).data, x.data * 2.0)
    np.testing.assert_array_equal(ad.add_const(x, 1.5).data, x.data + 1.5)
    check_gradients(
        lambda: ad.sum_all(ad.add_const(ad.scale(x, -0.3), 1.5)), [x], tol=1e-5
    )


def test_add_bias_broadcasts_rows_only(rng):
    x = Tensor(rng.uniform(-1, 1, (3, 4)))
    b = Tensor(rng.uniform(-1, 1, 4))
    out = ad.add_bias(x, b)
    np.testing.assert_array_equal(out.data, x.data + b.data)
    check_gradients(lambda: ad.sum_all(ad.add_bias(x, b)), [x, b], tol=1e-5)
    with pytest.raises(ShapeError):
        ad.add_bias(x, Tensor(np.zeros(3)))


# ---------------------------------------------------------------------------
# layer norm


def test_layer_norm_constant_row_reduces_to_bias():
    x = Tensor(np.full((2, 6), 4.2))
    gain = Tensor(np.ones(6))
    bias = Tensor(np.full(6, 0.7))
    out = ad.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-12)


def test_layer_norm_output_mean_is_bias(rng):
    x = Tensor(rng.uniform(-2, 2, (4, 8)))
    gain = Tensor(np.ones(8))
    bias = Tensor(rng.uniform(-1, 1, 8))
    out = ad.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data.mean(axis=0).mean(), bias.data.mean(), atol=1e-10)
    row_means = (out.data - bias.data).mean(axis=1)
    np.testing.assert_allclose(row_means, 0.0, atol=1e-10)


def test_layer_norm_gradient_matches_finite_differences(rng):
    x = Tensor(rng.uniform(-2, 2, (3, 5)))
    gain = Tensor(rng.uniform(0.5, 1.5, 5))
    bias = Tensor(rng.uniform(-1, 1, 5))
    c = ad.constant(rng.uniform(-1, 1, (3, 5)))
    check_gradients(
        lambda: ad.sum_all(ad.mul(ad.layer_norm(x, gain, bias), c)),
        [x, gain, bias],
        tol=1e-4,
    )


# ---------------------------------------------------------------------------
# indexing, reshaping, conv


def test_embed_and_take_per_row_gradients(rng):
    table = Tensor(rng.uniform(-1, 1, (6, 4)))
    ids = np.array([0, 3, 3, 5])
    out = ad.embed(table, ids)
    np.testing.assert_array_equal(out.data, table.data[ids])
    check_gradients(lambda: ad.sum_all(ad.embed(table, ids)), [table], tol=1e-5)

    x = Tensor(rng.uniform(-1, 1, (4, 5)))
    cols = np.array([1, 0, 4, 2])
    out = ad.take_per_row(x, cols)
    np.testing.assert_array_equal(out.data, x.data[np.arange(4), cols])
    check_gradients(lambda: ad.sum_all(ad.take_per_row(x, cols)), [x], tol=1e-5)


def test_embed_rejects_out_of_range_ids():
    table = Tensor(np.zeros((3, 2)))
    with pytest.raises(DomainError):
        ad.embed(table, [0, 3])


def test_reshape_transpose_concat(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 6)))
    r = ad.reshape(x, (3, 4))
    assert r.data.shape == (3, 4)
    with pytest.raises(ShapeError):
        ad.reshape(x, (5, 5))
    t = ad.transpose(x)
    np.testing.assert_array_equal(t.data, x.data.T)
    a = Tensor(rng.uniform(-1, 1, (3, 2)))
    b = Tensor(rng.uniform(-1, 1, (3, 4)))
    cat = ad.concat_cols([a, b])
    assert cat.data.shape == (3, 6)
    check_gradients(
        lambda: ad.sum_all(ad.mul(ad.concat_cols([a, b]), ad.concat_cols([a, b]))),
        [a, b],
        tol=1e-5,
    )


def test_conv3x3_shapes_and_gradient(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 8, 5)))
    w = Tensor(rng.uniform(-0.5, 0.5, (3, 2, 3, 3)))
    b = Tensor(rng.uniform(-0.5, 0.5, 3))
    out = ad.conv3x3(x, w, b, time_stride=2)
    assert out.data.shape == (3, 4, 5)
    c = ad.constant(rng.uniform(-1, 1, (3, 4, 5)))
    check_gradients(
        lambda: ad.sum_all(
            ad.mul(ad.reshape(ad.conv3x3(x, w, b), (3, 20)), ad.reshape(c, (3, 20)))
        ),
        [x, w, b],
        tol=1e-4,
    )


def test_conv3x3_odd_length_truncates_to_floor():
    x = Tensor(np.zeros((1, 7, 4)))
    w = Tensor(np.zeros((2, 1, 3, 3)))
    b = Tensor(np.zeros(2))
    assert ad.conv3x3(x, w, b).data.shape == (2, 3, 4)


# ---------------------------------------------------------------------------
# backward pass and graph bookkeeping


def test_backward_sum_gives_ones(rng):
    w = Tensor(rng.uniform(-2, 2, (3, 4)))
    loss = ad.sum_all(w)
    ad.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((3, 4)))


def test_backward_sum_of_squares_gives_two_w(rng):
    w = Tensor(rng.uniform(-2, 2, (3, 4)))
    loss = ad.sum_all(ad.mul(w, w))
    ad.backward(loss)
    np.testing.assert_allclose(w.grad, 2.0 * w.data, rtol=1e-15)


def test_backward_composite_graph_matches_finite_differences(rng):
    a = Tensor(rng.uniform(0.2, 2, (2, 3)))
    b = Tensor(rng.uniform(-2, 2, (3, 2)))
    c = Tensor(rng.uniform(-2, 2, (2, 2)))

    def f():
        return ad.sum_all(ad.mul(ad.relu(ad.matmul(ad.log(a), b)), c))

    check_gradients(f, [a, b, c], tol=1e-5)


def test_backward_requires_scalar_loss():
    x = Tensor(np.zeros((2, 2)))
    with pytest.raises(ContractError):
        ad.backward(ad.add(x, x))


def test_reused_tensor_accumulates_gradient(rng):
    x = Tensor(rng.uniform(0.5, 1.5, (2, 2)))
    # y = x*x + x, dy/dx = 2x + 1 through both uses of x
    loss = ad.sum_all(ad.add(ad.mul(x, x), x))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0, rtol=1e-15)


def test_unreachable_tensor_keeps_no_grad(rng):
    x = Tensor(rng.uniform(-1, 1, (2, 2)))
    y = Tensor(rng.uniform(-1, 1, (2, 2)))
    loss = ad.sum_all(x)
    ad.backward(loss)
    assert x.grad is not None
    assert y.grad is None


def test_graph_nodes_are_in_topological_recorded_order(rng):
    a = Tensor(rng.uniform(-1, 1, (2, 2)))
    b = Tensor(rng.uniform(-1, 1, (2, 2)))
    loss = ad.sum_all(ad.mul(ad.add(a, b), a))
    nodes = ad.graph_nodes(loss)
    ids = [t.node_id for t in nodes]
    assert ids == sorted(ids)
    position = {id(t): i for i, t in enumerate(nodes)}
    for t in nodes:
        for inp in t._inputs:
            assert position[id(inp)] < position[id(t)]


def test_find_nonfinite_reports_first_bad_node():
    x = Tensor(np.array([[1.0, np.inf]]))
    y = ad.scale(x, 2.0)
    bad = ad.find_nonfinite(ad.sum_all(y))
    assert bad is x


def test_forward_determinism():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.uniform(-2, 2, (3, 3)))
        y = ad.softmax(ad.matmul(x, ad.transpose(x)))
        return y.data.copy()

    np.testing.assert_array_equal(run(), run())


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10**6))
def test_softmax_rows_sum_to_one_property(n, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-80, 80, (2, n)))
    sums = ad.softmax(x).data.sum(axis=-1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)
