import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdiff import tensor as T
from mmdiff.errors import ShapeError
from mmdiff.head import head_forward, init_head_params, pool_mean

from oracles import gradcheck

D, L_OUT, C = 6, 3, 2


def make_params(seed=0):
    rng = np.random.default_rng(seed)
    return {k: T.Tensor(v) for k, v in init_head_params(D, L_OUT, C, lambda s: rng.standard_normal(s) * 0.4).items()}


def inputs(seed, B=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, 4, D)), rng.standard_normal((B, 5, D)), rng.standard_normal((B, 3, D))


class TestPool:
    def test_hand_example(self):
        np.testing.assert_array_equal(pool_mean([[1.0, 3.0], [3.0, 5.0]]).data, [2.0, 4.0])

    def test_single_row(self):
        np.testing.assert_array_equal(pool_mean([[1.5, -2.0]]).data, [1.5, -2.0])

    def test_symmetric_rows_cancel(self):
        v = np.random.default_rng(0).standard_normal(4)
        np.testing.assert_allclose(pool_mean(np.stack([v, -v])).data, 0.0, atol=1e-15)

    def test_masked_rows_ignored(self):
        x = np.array([[[1.0], [3.0], [100.0]]])
        np.testing.assert_array_equal(pool_mean(x, np.array([[True, True, False]])).data, [[2.0]])

    def test_empty(self):
        with pytest.raises(ShapeError):
            pool_mean(np.zeros((0, 3)))


class TestHead:
    def test_equal_logits_average_the_three(self):
        p = make_params()
        p["head.fuse.w2"] = T.Tensor(np.zeros_like(p["head.fuse.w2"].data))
        out = head_forward(*inputs(1), p, L_OUT, C)
        np.testing.assert_allclose(out.gamma.data, 1 / 3, atol=1e-15)
        mean = (out.y_z.data + out.y_t.data + out.y_d.data) / 3
        np.testing.assert_allclose(out.y_hat.data.reshape(2, -1), mean, atol=1e-14)

    def test_identical_sources_pass_through(self):
        p = make_params()
        for s in ("t", "d"):
            p[f"head.{s}.w"], p[f"head.{s}.b"] = p["head.z.w"], p["head.z.b"]
        z, _, _ = inputs(2)
        out = head_forward(z, z, z, p, L_OUT, C)
        np.testing.assert_allclose(out.y_hat.data.reshape(2, -1), out.y_z.data, atol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gamma_simplex_and_convex_hull(self, seed):
        out = head_forward(*inputs(seed), make_params(seed), L_OUT, C)
        g = out.gamma.data
        assert g.shape == (2, 3) and np.all(g > 0)
        np.testing.assert_allclose(g.sum(-1), 1.0, atol=1e-12)
        stack = np.stack([out.y_z.data, out.y_t.data, out.y_d.data])
        y = out.y_hat.data.reshape(2, -1)
        assert np.all(y >= stack.min(0) - 1e-12) and np.all(y <= stack.max(0) + 1e-12)

    def test_output_shape(self):
        assert head_forward(*inputs(3), make_params(), L_OUT, C).y_hat.shape == (2, L_OUT, C)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            head_forward(*inputs(3), make_params(), L_OUT + 1, C)

    def test_gradient_to_every_parameter(self):
        z, t, d = inputs(4)
        arrays = {k: v.data for k, v in make_params(5).items()}
        w = np.random.default_rng(9).standard_normal((2, L_OUT, C))
        fn = lambda p: T.sum_(T.square(head_forward(z, t, d, p, L_OUT, C).y_hat - w))
        assert gradcheck(fn, arrays, max_entries=30) < 1e-4
