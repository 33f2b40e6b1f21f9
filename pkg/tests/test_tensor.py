"""Autodiff engine tests: frozen hand values, gradcheck sweeps, properties."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvt import tensor as T
from mvt.errors import NumericsError, ShapeError
from mvt.tensor import Tensor, gradcheck


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((3, 4))
    out = T.matmul(Tensor(np.eye(3)), Tensor(b))
    np.testing.assert_array_equal(out.data, b)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(1)
    err = gradcheck(T.matmul, [rand(rng, 4, 5), rand(rng, 5, 3)])
    assert err < 1e-6


def test_matmul_batched_gradcheck():
    rng = np.random.default_rng(2)
    err = gradcheck(T.matmul, [rand(rng, 2, 3, 4, 5), rand(rng, 2, 3, 5, 2)])
    assert err < 1e-6


def test_matmul_broadcast_gradcheck():
    rng = np.random.default_rng(3)
    err = gradcheck(T.matmul, [rand(rng, 2, 3, 4, 5), rand(rng, 5, 2)])
    assert err < 1e-6


# -- conv2d -------------------------------------------------------------------


def test_conv2d_all_ones_is_nine():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, w)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 9.0


def test_conv2d_depthwise_identity():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Tensor(np.ones((2, 1, 1, 1)))
    out = T.conv2d(x, w, groups=2)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_nonpositive_extent_errors():
    with pytest.raises(ShapeError, match="nonpositive"):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_gradcheck():
    rng = np.random.default_rng(5)
    x = rand(rng, 1, 3, 8, 8)
    w = rand(rng, 4, 3, 3, 3)
    err = gradcheck(lambda a, b: T.conv2d(a, b, stride=2, padding=1), [x, w])
    assert err < 1e-5


def test_conv2d_grouped_gradcheck():
    rng = np.random.default_rng(6)
    x = rand(rng, 2, 4, 6, 6)
    w = rand(rng, 4, 1, 3, 3)
    err = gradcheck(lambda a, b: T.conv2d(a, b, stride=1, padding=1, groups=4), [x, w])
    assert err < 1e-5


def test_conv2d_stride7_kernel7():
    rng = np.random.default_rng(7)
    x = rand(rng, 1, 2, 28, 28)
    w = rand(rng, 3, 2, 7, 7)
    out = T.conv2d(x, w, stride=7, padding=0)
    assert out.shape == (1, 3, 4, 4)
    err = gradcheck(lambda a, b: T.conv2d(a, b, stride=7, padding=0), [x, w])
    assert err < 1e-5


def test_conv2d_1x1_equals_per_pixel_linear():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3, 1, 1))
    out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=0).data
    # reshape oracle: pixels as rows of a plain matrix product
    ref = (x.transpose(0, 2, 3, 1).reshape(-1, 3) @ w.reshape(5, 3).T)
    ref = ref.reshape(2, 4, 4, 5).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, ref, atol=1e-12)


# -- linear -------------------------------------------------------------------


def test_linear_identity():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3))
    out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, x)


def test_linear_hand_case():
    out = T.linear(Tensor([1.0, 1.0]), Tensor([[2.0, 3.0]]), Tensor([1.0]))
    np.testing.assert_array_equal(out.data, [6.0])


def test_linear_gradcheck():
    rng = np.random.default_rng(10)
    err = gradcheck(T.linear, [rand(rng, 2, 7, 4), rand(rng, 5, 4), rand(rng, 5)])
    assert err < 1e-6


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((5, 4))))


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 1000.0]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_closed_form():
    out = T.softmax(Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-30, 30))
def test_softmax_rows_sum_to_one_and_shift_invariant(vals, shift):
    x = np.array(vals)
    s = T.softmax(Tensor(x)).data
    assert abs(s.sum() - 1.0) <= 1e-12
    assert (s >= 0).all()
    s2 = T.softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(s, s2, atol=1e-12)


def test_softmax_gradcheck():
    # sum(softmax) is identically 1, so weight the output to get a usable scalar
    rng = np.random.default_rng(11)
    r = Tensor(rng.standard_normal((3, 5)))
    err = gradcheck(lambda x: T.softmax(x, axis=-1) * r, [rand(rng, 3, 5)])
    assert err < 1e-6


def test_log_softmax_gradcheck():
    rng = np.random.default_rng(12)
    err = gradcheck(lambda x: T.log_softmax(x, axis=-1), [rand(rng, 3, 5)])
    assert err < 1e-6


# -- layernorm ------------------------------------------------------------------


def test_layernorm_constant_vector_is_zero():
    out = T.layernorm(Tensor([4.0, 4.0, 4.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)


def test_layernorm_two_point_closed_form():
    out = T.layernorm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_layernorm_gradcheck():
    rng = np.random.default_rng(13)
    err = gradcheck(T.layernorm, [rand(rng, 2, 5), rand(rng, 5), rand(rng, 5)])
    assert err < 1e-6


# -- activations -----------------------------------------------------------------


def test_activation_fixed_points():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert T.relu(Tensor(-1.0)).item() == 0.0
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_relu_grad_piecewise():
    for x, expect in [(2.0, 1.0), (-2.0, 0.0)]:
        t = Tensor(x, requires_grad=True)
        T.relu(t).backward()
        assert t.grad == expect


def test_gelu_gradcheck():
    rng = np.random.default_rng(14)
    err = gradcheck(T.gelu, [rand(rng, 10)])
    assert err < 1e-5


def test_sigmoid_gradcheck():
    rng = np.random.default_rng(15)
    err = gradcheck(T.sigmoid, [rand(rng, 10)])
    assert err < 1e-6


# -- pooling ---------------------------------------------------------------------


def test_global_avg_pool_constant():
    out = T.global_avg_pool(Tensor(np.full((1, 2, 3, 3), 7.0)))
    np.testing.assert_array_equal(out.data, [[7.0, 7.0]])


def test_adaptive_pool_block_means():
    blocks = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2)))
    out = T.adaptive_avg_pool(Tensor(blocks[None, None]), (2, 2))
    np.testing.assert_array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_adaptive_pool_uneven_bins():
    # 5 -> 2 bins: [0,2) and [2,5)
    x = Tensor(np.arange(5.0)[None, None, :, None] * np.ones((1, 1, 5, 1)))
    out = T.adaptive_avg_pool(x, (2, 1))
    np.testing.assert_allclose(out.data[0, 0, :, 0], [0.5, 3.0])


def test_pool_gradcheck():
    rng = np.random.default_rng(16)
    err = gradcheck(lambda x: T.adaptive_avg_pool(x, (2, 2)), [rand(rng, 1, 2, 5, 5)])
    assert err < 1e-6
    err = gradcheck(T.global_avg_pool, [rand(rng, 2, 3, 4, 4)])
    assert err < 1e-6


# -- structural ops ----------------------------------------------------------------


def test_concat_slice_take_gradcheck():
    rng = np.random.default_rng(17)
    err = gradcheck(lambda a, b: T.concat([a, b], axis=1), [rand(rng, 2, 3), rand(rng, 2, 2)])
    assert err < 1e-6
    err = gradcheck(lambda a: T.slice_axis(a, 1, 1, 3), [rand(rng, 2, 4)])
    assert err < 1e-6
    err = gradcheck(lambda a: T.take(a, [2, 0, 1, 1], axis=0), [rand(rng, 3, 2)])
    assert err < 1e-6


def test_broadcast_and_reductions_gradcheck():
    rng = np.random.default_rng(18)
    err = gradcheck(lambda a: T.broadcast_to(a, (4, 2, 3)), [rand(rng, 2, 3)])
    assert err < 1e-6
    err = gradcheck(lambda a: T.tmean(a, axis=1), [rand(rng, 3, 4)])
    assert err < 1e-6
    err = gradcheck(lambda a, b: a * b + a / b, [rand(rng, 3), Tensor(rng.uniform(1.0, 2.0, 3))])
    assert err < 1e-6


def test_diamond_graph_accumulates():
    x = Tensor(3.0, requires_grad=True)
    y = x * x  # dy/dx = 6
    z = y + y  # dz/dx = 12
    z.backward()
    assert x.grad == 12.0


# -- gradcheck oracle itself ---------------------------------------------------------


def test_gradcheck_linear_function_zero_error():
    rng = np.random.default_rng(19)
    err = gradcheck(lambda x: x.sum(), [rand(rng, 5)])
    assert err < 1e-10


def test_gradcheck_square_closed_form():
    x = Tensor([1.0, 2.0])
    err = gradcheck(T.square, [x])
    assert err < 1e-8
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_gradcheck_flags_wrong_gradient():
    def bad(x):
        data = x.data * x.data

        def backward(g):
            x._accum_grad(g * 3.0 * x.data)  # wrong: should be 2x

        return T._make(data, (x,), backward, "bad_square")

    err = gradcheck(bad, [Tensor([1.0, -2.0])])
    assert err > 0.1


def test_gradcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        gradcheck(T.square, [Tensor([1.0])], step=1e-2)


def test_gradcheck_nonfinite_is_oracle_failure():
    with np.errstate(invalid="ignore"), pytest.raises(NumericsError):
        gradcheck(T.log, [Tensor([-1.0])])


def test_debug_mode_catches_nonfinite():
    with np.errstate(divide="ignore"), pytest.raises(NumericsError):
        T.log(Tensor([0.0]))  # -inf under debug checks


def test_forward_on_finite_inputs_is_finite():
    rng = np.random.default_rng(20)
    x = rand(rng, 2, 3, 8, 8)
    w = rand(rng, 4, 3, 3, 3)
    out = T.conv2d(x, w, stride=2, padding=1)
    out = T.gelu(out)
    out = T.softmax(T.reshape(out, (2, -1)), axis=-1)
    assert np.all(np.isfinite(out.data))


# -- gradcheck sweep across every differentiable primitive ----------------------------


OPS = {
    "matmul": lambda rng: (T.matmul, [Tensor(rng.standard_normal((4, 5))), Tensor(rng.standard_normal((5, 3)))]),
    "conv2d": lambda rng: (
        lambda a, b: T.conv2d(a, b, stride=2, padding=1),
        [Tensor(rng.standard_normal((1, 3, 8, 8))), Tensor(rng.standard_normal((4, 3, 3, 3)))],
    ),
    "linear": lambda rng: (
        T.linear,
        [Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4))), Tensor(rng.standard_normal(5))],
    ),
    "softmax": lambda rng: (
        lambda x, r: T.softmax(x, -1) * r,
        [Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((3, 5)))],
    ),
    "layernorm": lambda rng: (
        T.layernorm,
        [Tensor(rng.standard_normal((2, 5))), Tensor(rng.standard_normal(5)), Tensor(rng.standard_normal(5))],
    ),
    "gelu": lambda rng: (T.gelu, [Tensor(rng.standard_normal(10))]),
    "relu": lambda rng: (T.relu, [Tensor(rng.standard_normal(10) + 0.3)]),
    "sigmoid": lambda rng: (T.sigmoid, [Tensor(rng.standard_normal(10))]),
    "pool": lambda rng: (lambda x: T.adaptive_avg_pool(x, (2, 2)), [Tensor(rng.standard_normal((1, 2, 6, 6)))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_every_primitive_gradchecks_on_three_seeds(name, seed):
    f, xs = OPS[name](np.random.default_rng(100 + seed))
    assert gradcheck(f, xs) < 1e-4
