import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmdiff import tensor as T
from mmdiff.errors import ContractError, NonFiniteError, ShapeError

from oracles import gradcheck, weighted_sum

RNG = np.random.default_rng(1234)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        a = rand(2, 3)
        np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)

    def test_hand_example(self):
        out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_zero_annihilates(self):
        assert not T.matmul(np.zeros((3, 2)), rand(2, 4)).data.any()

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(rand(2, 3), rand(2, 3))

    def test_batched_against_weight_matrix(self):
        x, w = rand(3, 4, 5), rand(5, 2)
        np.testing.assert_allclose(T.matmul(x, w).data, np.einsum("bij,jk->bik", x, w), atol=1e-12)

    @pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
    def test_gradient(self, shapes):
        a, b = rand(*shapes[0]), rand(*shapes[1])
        assert gradcheck(lambda p: weighted_sum(T.matmul(p["a"], p["b"])), {"a": a, "b": b}) < 1e-4


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(T.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        assert T.softmax([4.2]).data.tolist() == [1.0]

    def test_closed_form(self):
        out = T.softmax([math.log(1), math.log(2), math.log(3)]).data
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(x, axis=-1).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(rand(2, 3), axis=2)

    def test_gradient(self):
        assert gradcheck(lambda p: weighted_sum(T.softmax(p["x"], axis=0)), {"x": rand(4, 3)}) < 1e-4


class TestLayerNorm:
    def test_constant_vector(self):
        out = T.layer_norm(np.full(5, 3.0), np.ones(5), np.zeros(5)).data
        np.testing.assert_array_equal(out, np.zeros(5))

    def test_unit_variance_pair(self):
        out = T.layer_norm([1.0, -1.0], np.ones(2), np.zeros(2), eps=1e-14).data
        np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-12)

    def test_zero_gain_gives_bias(self):
        b = rand(4)
        np.testing.assert_array_equal(T.layer_norm(rand(3, 4), np.zeros(4), b).data, np.broadcast_to(b, (3, 4)))

    def test_moments(self):
        out = T.layer_norm(rand(6, 16) * 5 + 2, np.ones(16), np.zeros(16), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-9)

    def test_gain_shape_checked(self):
        with pytest.raises(ShapeError):
            T.layer_norm(rand(2, 4), np.ones(3), np.zeros(4))

    def test_gradient(self):
        arrays_ = {"x": rand(3, 5), "g": rand(5), "b": rand(5)}
        assert gradcheck(lambda p: weighted_sum(T.layer_norm(p["x"], p["g"], p["b"])), arrays_) < 1e-4


UNARY = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "exp": T.exp,
    "square": T.square,
    "mean_axis": lambda x: T.mean(x, axis=1),
    "sum_keepdims": lambda x: T.sum_(x, axis=0, keepdims=True),
    "reshape": lambda x: T.reshape(x, (4, 3)),
    "transpose": lambda x: T.transpose(x),
    "swapaxes": lambda x: T.swapaxes(T.reshape(x, (2, 3, 2)), 0, 2),
    "slice": lambda x: x[1:, ::2],
    "fancy_index": lambda x: T.getitem(x, (np.array([0, 0, 2]), np.array([1, 1, 3]))),
    "broadcast": lambda x: T.broadcast_to(T.reshape(x, (1, 3, 4)), (2, 3, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = rand(3, 4)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink
    assert gradcheck(lambda p: weighted_sum(UNARY[name](p["x"])), {"x": x}) < 1e-4


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": T.div,
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("bshape", [(3, 4), (4,), (3, 1)])
def test_binary_gradients_with_broadcasting(name, bshape):
    a, b = rand(3, 4), rand(*bshape)
    if name == "div":
        b = np.sign(b) * (np.abs(b) + 0.5)
    assert gradcheck(lambda p: weighted_sum(BINARY[name](p["a"], p["b"])), {"a": a, "b": b}) < 1e-4


def test_mse_gradient():
    assert gradcheck(lambda p: T.mse(p["a"], p["b"]), {"a": rand(3, 4), "b": rand(3, 4)}) < 1e-4


def test_concat_and_take_rows_gradients():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    fn = lambda p: weighted_sum(T.concat([T.take_rows(p["table"], ids), p["x"]], axis=1))
    assert gradcheck(fn, {"table": rand(4, 5), "x": rand(2, 2, 5)}) < 1e-4


def test_linear_gradient():
    fn = lambda p: weighted_sum(T.linear(p["x"], p["w"], p["b"]))
    assert gradcheck(fn, {"x": rand(2, 3, 4), "w": rand(4, 5), "b": rand(5)}) < 1e-4


class TestBackward:
    def test_scalar_passthrough(self):
        x = T.parameter(3.0)
        y = T.mul(x, 1.0)
        T.backward(y)
        assert x.grad == 1.0

    def test_linearity(self):
        x = T.parameter(rand(3, 2))
        T.backward(T.sum_(T.mul(x, 2.0)))
        np.testing.assert_array_equal(x.grad, np.full((3, 2), 2.0))

    def test_fan_out_accumulates(self):
        x0 = rand(5)
        f = lambda x: T.sum_(T.tanh(x))
        g = lambda x: T.sum_(T.square(x))
        xs = [T.parameter(x0) for _ in range(3)]
        T.backward(f(xs[0]))
        T.backward(g(xs[1]))
        T.backward(T.add(f(xs[2]), g(xs[2])))
        np.testing.assert_allclose(xs[2].grad, xs[0].grad + xs[1].grad, atol=1e-12)

    def test_diamond_graph_visits_each_node_once(self):
        x = T.parameter(2.0)
        y = T.mul(x, x)
        z = T.add(y, y)
        T.backward(z)
        assert x.grad == pytest.approx(8.0)

    def test_non_scalar_loss_rejected(self):
        x = T.parameter(rand(3))
        with pytest.raises(ContractError):
            T.backward(T.mul(x, 2.0))

    def test_loss_without_params_rejected(self):
        with pytest.raises(ContractError):
            T.backward(T.sum_(T.Tensor(rand(3))))

    def test_deterministic(self):
        def run():
            x = T.parameter(np.arange(6.0).reshape(2, 3) / 7)
            T.backward(weighted_sum(T.gelu(T.matmul(x, np.ones((3, 3)) * 0.3))))
            return x.grad

        assert run().tobytes() == run().tobytes()

    def test_no_grad_records_nothing(self):
        x = T.parameter(rand(3))
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp([1000.0])
    with pytest.raises(NonFiniteError):
        T.div([1.0], [0.0])


def test_gelu_tanh_form():
    x = np.linspace(-3, 3, 13)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(x).data, ref, atol=1e-14)
