import numpy as np
import pytest

from mmdiff import tensor as T
from mmdiff.errors import NonFiniteError
from mmdiff.optim import Adam, AdamState, adam_step, clip_grad_norm


def scalar_adam_trace(g_seq, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Textbook scalar Adam, one value at a time."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(x)
    return out


def test_zero_gradient_leaves_params_and_decays_moments():
    p = {"w": T.parameter(np.ones(3))}
    st = AdamState(m={"w": np.full(3, 0.5)}, v={"w": np.full(3, 0.25)})
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros(3)}, st)
    # moments nonzero so the parameter still moves; with fresh state it must not
    assert np.all(st.m["w"] < 0.5) and np.all(st.v["w"] < 0.25)
    q = {"w": T.parameter(before)}
    adam_step(q, {"w": np.zeros(3)}, AdamState())
    np.testing.assert_array_equal(q["w"].data, before)


def test_first_step_moves_by_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3])
    p = {"w": T.parameter(np.zeros(3))}
    adam_step(p, {"w": g}, AdamState(lr=1e-3))
    np.testing.assert_allclose(p["w"].data, -1e-3 * np.sign(g), rtol=1e-4)


def test_matches_scalar_oracle_over_many_steps():
    gs = np.random.default_rng(0).standard_normal(50)
    p = {"w": T.parameter(np.array([0.7]))}
    st = AdamState(lr=0.01)
    xs = []
    for g in gs:
        adam_step(p, {"w": np.array([g])}, st)
        xs.append(p["w"].data[0])
    np.testing.assert_allclose(xs, scalar_adam_trace(gs, lr=0.01, x0=0.7), rtol=1e-12, atol=1e-15)
    assert st.step == 50


def test_constant_gradient_moves_monotonically_against_it():
    p = {"w": T.parameter(np.array([0.0]))}
    st = AdamState()
    a = p["w"].data[0]
    adam_step(p, {"w": np.array([2.0])}, st)
    b = p["w"].data[0]
    adam_step(p, {"w": np.array([2.0])}, st)
    c = p["w"].data[0]
    assert a > b > c


def test_nan_gradient_aborts_without_changes():
    p = {"a": T.parameter(np.ones(2)), "b": T.parameter(np.ones(2))}
    st = AdamState()
    with pytest.raises(NonFiniteError, match="'b'"):
        adam_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st)
    assert st.step == 0 and not st.m
    np.testing.assert_array_equal(p["a"].data, np.ones(2))


def test_clip_grad_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0]), "c": None}
    clipped, total = clip_grad_norm(g, 1.0)
    assert total == pytest.approx(5.0)
    norm = np.sqrt(sum(np.sum(v**2) for v in clipped.values() if v is not None))
    assert norm == pytest.approx(1.0, rel=1e-9)
    same, _ = clip_grad_norm(g, 10.0)
    assert same is g


def test_wrapper_minimizes_quadratic():
    w = T.parameter(np.array([5.0, -3.0]))
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        T.backward(T.sum_(T.square(w)))
        opt.step()
    assert np.all(np.abs(w.data) < 1e-2)
