import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vipt import tensor as T
from vipt.tensor import ShapeError, Tape, Tensor, backward, grad_check


def naive_linear(x, w, b):
    n, cin = x.shape
    cout = w.shape[1]
    out = np.zeros((n, cout))
    for i in range(n):
        for j in range(cout):
            acc = b[j]
            for k in range(cin):
                acc += x[i, k] * w[k, j]
            out[i, j] = acc
    return out


class TestLinearPerToken:
    def test_zero_input_passes_bias(self):
        rng = np.random.default_rng(0)
        out = T.linear_per_token(np.zeros((4, 3)), rng.standard_normal((3, 2)), np.array([1.0, 2.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0], (4, 1)))

    def test_identity_weight(self):
        x = np.random.default_rng(1).standard_normal((5, 3))
        out = T.linear_per_token(x, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(out.data, x)

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
        out = T.linear_per_token(x, w, b)
        assert np.abs(out.data - naive_linear(x, w, b)).max() < 1e-12

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ShapeError, match=r"\(4, 3\).*\(2, 2\)"):
            T.linear_per_token(np.zeros((4, 3)), np.zeros((2, 2)), np.zeros(2))


class TestSoftmax:
    def test_closed_form(self):
        out = T.softmax(np.array([0.0, math.log(3.0)]), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-15)

    @pytest.mark.parametrize("k", [1, 2, 7])
    def test_constant_vector_is_uniform(self, k):
        np.testing.assert_allclose(T.softmax(np.full(k, 3.3), axis=0).data, 1.0 / k, atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = T.softmax(np.array([1000.0, 1001.0]), axis=0).data
        e = math.e
        np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e)], atol=1e-12)
        assert out[0] == pytest.approx(0.2689, abs=1e-4)

    def test_empty_axis_raises(self):
        with pytest.raises(ShapeError):
            T.softmax(np.zeros((3, 0)), axis=1)

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)),
        st.sampled_from([0, 1]),
        st.floats(-100, 100),
    )
    def test_sums_to_one_and_shift_invariant(self, x, axis, shift):
        y = T.softmax(x, axis=axis).data
        assert np.all(y >= 0)
        assert np.abs(y.sum(axis=axis) - 1.0).max() < 1e-12
        assert np.abs(T.softmax(x + shift, axis=axis).data - y).max() < 1e-12


class TestLayerNorm:
    def test_constant_row_gives_zeros(self):
        out = T.layer_norm(np.full((1, 4), 2.5), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out.data, np.zeros((1, 4)))

    def test_already_normalised_row(self):
        out = T.layer_norm(np.array([[1.0, -1.0]]), np.ones(2), np.zeros(2), eps=0.0)
        np.testing.assert_array_equal(out.data, [[1.0, -1.0]])

    def test_random_row_moments(self):
        x = np.random.default_rng(3).standard_normal((1, 16)) * 5 + 2
        y = T.layer_norm(x, np.ones(16), np.zeros(16), eps=1e-12).data[0]
        assert abs(y.mean()) < 1e-10
        assert abs(y.var() - 1.0) < 1e-6


class TestGelu:
    def test_zero(self):
        assert T.gelu(np.array(0.0)).item() == 0.0

    def test_asymptotes(self):
        assert T.gelu(np.array(10.0)).item() == pytest.approx(10.0, abs=1e-12)
        assert abs(T.gelu(np.array(-10.0)).item()) < 1e-12

    def test_value_at_one(self):
        # tanh-approximation evaluated directly with math
        expected = 0.5 * (1 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
        assert T.gelu(np.array(1.0)).item() == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(0.8412, abs=1e-4)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        with Tape():
            backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            backward(T.tsum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_untracked_tensor_gets_nothing(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        with Tape():
            backward(T.tsum(x * c))
        assert c.grad is None
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            with pytest.raises(ValueError, match="scalar"):
                backward(x * 2.0)

    def test_no_recording_outside_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert not y.requires_grad
        with pytest.raises(ValueError):
            backward(T.tsum(y))

    def test_each_node_visited_once_with_shared_inputs(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
            z = T.tsum(y + y + x)
            backward(z)
        # d/dx (2x^2 + x) = 4x + 1
        assert x.grad[0] == 13.0
        ids = [id(n.out) for n in tape.nodes]
        assert len(ids) == len(set(ids))


def _fd_check(fn, *shapes, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    for k, shape in enumerate(shapes):
        args = [rng.standard_normal(s) for s in shapes]
        tensors = [Tensor(a) for a in args]
        x = tensors[k]

        def f(_x):
            return T.tsum(fn(*tensors) * weights)

        probe = fn(*tensors)
        weights = rng.standard_normal(probe.shape)
        assert grad_check(f, x, 1e-5) < tol


class TestOpGradients:
    """Each primitive against central differences (weighted sum makes the loss generic)."""

    def test_elementwise(self):
        _fd_check(lambda a, b: a * b + a / (T.exp(b) + 1.0) - b, (3, 4), (3, 4))

    def test_broadcast_add_mul(self):
        _fd_check(lambda a, b: a * b + b, (3, 4), (4,))

    def test_matmul_batched(self):
        _fd_check(lambda a, b: T.matmul(a, b), (2, 3, 4), (2, 4, 5))

    def test_linear(self):
        _fd_check(T.linear_per_token, (5, 3), (3, 4), (4,))

    def test_softmax_axes(self):
        _fd_check(lambda a: T.softmax(a, axis=0), (4, 3))
        _fd_check(lambda a: T.softmax(a, axis=-1), (2, 4, 3))

    def test_layer_norm(self):
        _fd_check(lambda x, g, b: T.layer_norm(x, g, b), (4, 6), (6,), (6,))

    def test_gelu_sigmoid_tanh(self):
        _fd_check(lambda a: T.gelu(a) + T.sigmoid(a) * T.tanh(a), (10,))

    def test_shape_ops(self):
        _fd_check(lambda a: T.transpose(T.reshape(a, (3, 2, 2)), (2, 0, 1))[1:, :, 0], (4, 3))
        _fd_check(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))
        _fd_check(lambda a: T.mean(a, axis=1, keepdims=True) * a, (3, 4))

    def test_conv2d(self):
        _fd_check(T.conv2d, (3, 5, 5), (2, 3, 3, 3), (2,))

    def test_min_max_clip(self):
        # well-separated values keep every coordinate away from the kinks
        def f(a, b):
            return T.maximum(a, b + 10.0) + T.minimum(a, b - 10.0) + T.clip(a, -100.0, 100.0)

        _fd_check(f, (6,), (6,))

    def test_softmax_cross_entropy_length_5(self):
        target = np.eye(5)[2]
        x = Tensor(np.random.default_rng(9).standard_normal(5))

        def f(v):
            return -T.tsum(T.log(T.softmax(v, axis=0)) * target)

        assert grad_check(f, x, 1e-5) < 1e-5

    def test_grad_check_sum_of_squares(self):
        x = Tensor(np.random.default_rng(4).standard_normal(7))
        assert grad_check(lambda v: T.tsum(v * v), x, 1e-5) < 1e-8

    def test_grad_check_rejects_non_finite(self):
        x = Tensor(np.array([0.0, 1.0]))
        with pytest.raises(FloatingPointError):
            grad_check(lambda v: T.tsum(T.log(v)), x, 1e-5)


def test_conv2d_matches_naive_loop():
    rng = np.random.default_rng(5)
    x, w, b = rng.standard_normal((2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(x, w, b).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = b[o] + (w[o] * xp[:, i : i + 3, j : j + 3]).sum()
    assert np.abs(out - ref).max() < 1e-12


def test_forward_is_deterministic():
    rng = np.random.default_rng(6)
    x, w, b = rng.standard_normal((8, 16)), rng.standard_normal((16, 16)), rng.standard_normal(16)
    a = T.softmax(T.gelu(T.linear_per_token(x, w, b)), axis=1).data
    c = T.softmax(T.gelu(T.linear_per_token(x, w, b)), axis=1).data
    assert a.tobytes() == c.tobytes()
