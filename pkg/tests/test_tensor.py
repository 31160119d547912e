import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pseg import tensor as T
from tests import oracles


def leaf(x, dtype=np.float64):
    return T.Tensor(np.array(x, dtype=dtype), requires_grad=True)


# -- elementwise ------------------------------------------------------------


def test_abs_values_and_zero_subgradient():
    x = leaf([-0.5, 0.0, 2.0])
    y = T.abs(x)
    np.testing.assert_array_equal(y.data, [0.5, 0.0, 2.0])
    T.backward(T.reduce_sum(y))
    np.testing.assert_array_equal(x.grad, [-1.0, 0.0, 1.0])


def test_tanh_zero():
    assert T.tanh(T.Tensor([0.0])).data.tolist() == [0.0]


def test_mul_by_scalar():
    np.testing.assert_array_equal(T.mul(T.Tensor([1.0, 2.0, 3.0]), 2).data, [2, 4, 6])
    np.testing.assert_array_equal(T.scalar_mul(T.Tensor([1.0, 2.0, 3.0]), 2).data, [2, 4, 6])


def test_elementwise_dispatch_names():
    a, b = T.Tensor([4.0, 9.0]), T.Tensor([2.0, 3.0])
    assert T.elementwise("add", a, b).data.tolist() == [6, 12]
    assert T.elementwise("sub", a, b).data.tolist() == [2, 6]
    assert T.elementwise("div", a, b).data.tolist() == [2, 3]
    assert T.elementwise("sqrt", a).data.tolist() == [2, 3]
    assert T.elementwise("scalar-mul", a, 0.5).data.tolist() == [2, 4.5]
    with pytest.raises(ValueError):
        T.elementwise("pow", a, b)


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        T.div(T.Tensor([1.0]), T.Tensor([0.0]))


def test_trailing_broadcast_only():
    a = T.Tensor(np.ones((2, 3, 4)))
    assert T.add(a, T.Tensor(np.ones((3, 4)))).shape == (2, 3, 4)
    assert T.add(a, 1.0).shape == (2, 3, 4)
    with pytest.raises(T.ShapeError):
        T.add(a, T.Tensor(np.ones((2, 3))))


def test_debug_mode_rejects_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(T.NonFiniteError):
            T.Tensor([1.0, np.nan])
    finally:
        T.set_debug(False)


def test_default_dtype_is_float32():
    assert T.Tensor([1, 2]).dtype == np.float32


# -- reductions -------------------------------------------------------------


def test_reduce_examples():
    assert T.reduce("sum", T.Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=1).data.tolist() == [3, 7]
    assert float(T.reduce("mean", T.Tensor([2.0, 4.0])).data) == 3.0


def test_max_first_argmax_gradient():
    x = leaf([1.0, 5.0, 5.0])
    y = T.reduce("max", x)
    assert float(y.data) == 5.0
    T.backward(y)
    np.testing.assert_array_equal(x.grad, [0, 1, 0])


def test_empty_reduction_axis_raises():
    with pytest.raises(T.ShapeError):
        T.reduce_sum(T.Tensor(np.zeros((0, 3))), axis=0)


# -- matmul -----------------------------------------------------------------


def test_matmul_examples():
    v = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(v)).data, v)
    assert T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    np.testing.assert_allclose(T.matmul(T.Tensor(a), T.Tensor(b)).data, oracles.matmul_loops(a, b), atol=1e-6)


def test_matmul_dim_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1)))).data, x)


def test_conv_box_on_constant_image():
    c = 0.7
    x = np.full((1, 5, 5), c)
    y = T.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64), padding="same").data
    assert y.shape == (1, 5, 5)
    assert y[0, 2, 2] == pytest.approx(9 * c)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_naive_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.standard_normal((2, 7, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, oracles.conv2d_loops(x, w, b, stride, padding), atol=1e-5)


def test_conv_output_size_checks():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.ones((1, 2, 2))), T.Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.ones((2, 4, 4))), T.Tensor(np.ones((1, 1, 3, 3))))


# -- resample ---------------------------------------------------------------


def test_resample_examples():
    pooled = T.resample(T.Tensor([[[1.0, 1.0], [3.0, 3.0]]]), (1, 1), "average-pool").data
    assert pooled.tolist() == [[[2.0]]]
    up = T.resample(T.Tensor([[[5.0]]]), (2, 2), "nearest").data
    assert up.tolist() == [[[5, 5], [5, 5]]]
    bil = T.resample(T.Tensor([[[0.0, 1.0], [0.0, 1.0]]]), (3, 3), "bilinear").data
    np.testing.assert_allclose(bil[0, :, 1], 0.5)


def test_resample_rejects_empty_target():
    with pytest.raises(T.ShapeError):
        T.resample(T.Tensor(np.ones((1, 2, 2))), (0, 2))


# -- backward ---------------------------------------------------------------


def test_backward_examples():
    x = leaf([1.0, 2.0])
    T.backward(T.reduce_sum(T.square(x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    y = leaf(-3.0)
    T.backward(T.abs(y))
    assert float(y.grad) == -1.0


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(T.ShapeError):
        T.backward(T.square(x))


def test_backward_accumulates_across_calls():
    x = leaf([1.0, 2.0])
    T.backward(T.reduce_sum(x * x))
    T.backward(T.reduce_sum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_subexpression_matches_duplicated_graph():
    rng = np.random.default_rng(3)
    v = rng.standard_normal(6)
    x1 = leaf(v)
    s = T.tanh(x1)
    T.backward(T.reduce_sum(s * s + s))
    x2 = leaf(v)
    a, b, c = T.tanh(x2), T.tanh(x2), T.tanh(x2)
    T.backward(T.reduce_sum(a * b + c))
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-12)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_corruption_hook_changes_gradient_and_clears():
    T.corrupt_backward("tanh")
    try:
        x = leaf([0.3])
        T.backward(T.reduce_sum(T.tanh(x)))
        bad = float(x.grad[0])
    finally:
        T.clear_corruption()
    x = leaf([0.3])
    T.backward(T.reduce_sum(T.tanh(x)))
    assert bad == pytest.approx(1.5 * float(x.grad[0]))


# -- adam -------------------------------------------------------------------


def test_adam_zero_gradient_leaves_params():
    p = {"w": T.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)}
    st_ = T.AdamState(p)
    before = p["w"].data.copy()
    T.adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, st_, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, before)


def test_adam_first_step_bounded_by_lr():
    rng = np.random.default_rng(0)
    p = {"w": T.Tensor(rng.standard_normal(10), requires_grad=True)}
    st_ = T.AdamState(p)
    before = p["w"].data.copy()
    g = rng.standard_normal(10) * 100
    T.adam_step(p, {"w": g}, st_, lr=0.01)
    delta = p["w"].data - before
    assert np.all(np.abs(delta) <= 0.01 * (1 + 1e-6))
    assert np.all(np.sign(delta) == -np.sign(g))


def test_adam_descends_parabola():
    p = {"x": T.Tensor(np.array([5.0]), requires_grad=True)}
    st_ = T.AdamState(p)
    for _ in range(200):
        T.adam_step(p, {"x": 2 * p["x"].data}, st_, lr=0.1)
    assert abs(float(p["x"].data[0])) < 0.5


# -- properties -------------------------------------------------------------

floats = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-10, 10))


@settings(max_examples=60, deadline=None)
@given(floats)
def test_elementwise_forward_matches_numpy(a):
    x = T.Tensor(a)
    np.testing.assert_array_equal(T.abs(x).data, np.abs(a))
    np.testing.assert_array_equal(T.square(x).data, a * a)
    np.testing.assert_array_equal(T.tanh(x).data, np.tanh(a))
    np.testing.assert_array_equal(T.add(x, x).data, a + a)
    np.testing.assert_array_equal(T.reduce_sum(x, axis=0).data, a.sum(axis=0))


@settings(max_examples=40, deadline=None)
@given(floats, st.integers(0, 2**31 - 1))
def test_ops_are_pure(a, seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(a.shape)
    outs = []
    for _ in range(2):
        x = leaf(a)
        T.backward(T.reduce_sum(T.tanh(x) * T.Tensor(w)))
        outs.append(x.grad.copy())
    np.testing.assert_array_equal(outs[0], outs[1])
