import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualcycle import functional as F
from dualcycle import tensor as T
from dualcycle.errors import ContractError, LabelError, ShapeError
from dualcycle.params import ParamStore
from dualcycle.tensor import Tensor, backward
from gradcheck import ELEMENTWISE, FD_RTOL, grad_errors

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def _gru_params(e, h, rng, scale=0.5):
    return {
        "W_x": Tensor(rng.normal(0, scale, (3 * h, e))),
        "U_zr": Tensor(rng.normal(0, scale, (2 * h, h))),
        "U_c": Tensor(rng.normal(0, scale, (h, h))),
        "b": Tensor(rng.normal(0, scale, 3 * h)),
    }


# -- affine -------------------------------------------------------------------------


def test_affine_identity_weights():
    out = F.affine(Tensor([3.0, -1.0]), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    assert out.data.tolist() == [3.0, -1.0]


def test_affine_zero_weights_returns_bias():
    out = F.affine(Tensor([7.0, -2.0]), Tensor(np.zeros((2, 2))), Tensor([5.0, 5.0]))
    assert out.data.tolist() == [5.0, 5.0]


def test_affine_matches_loop_product():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    expected = [b[i] + sum(W[i, j] * x[j] for j in range(3)) for i in range(4)]
    out = F.affine(Tensor(x), Tensor(W), Tensor(b))
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_affine_shape_mismatch():
    with pytest.raises(ShapeError):
        F.affine(Tensor(np.ones(4)), Tensor(np.ones((2, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        F.affine(Tensor(np.ones(3)), Tensor(np.ones((2, 3))), Tensor(np.zeros(3)))


# -- GRU ----------------------------------------------------------------------------


def test_gru_zero_params_halves_state():
    e, h = 3, 4
    params = {k: Tensor(np.zeros(s)) for k, s in
              {"W_x": (3 * h, e), "U_zr": (2 * h, h), "U_c": (h, h), "b": (3 * h,)}.items()}
    h_prev = np.array([1.0, -2.0, 0.5, 4.0])
    out = F.gru_step(Tensor(np.ones(e)), Tensor(h_prev), params)
    np.testing.assert_array_equal(out.data, 0.5 * h_prev)


def test_gru_scalar_case_from_zero_state():
    # h = 1, e = 2, zero biases and zero state: h_new = z * tanh(w_c . x), z = sigmoid(w_z . x)
    w_z, w_r, w_c = [0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]
    x = [0.5, -1.5]
    params = {
        "W_x": Tensor(np.array([w_z, w_r, w_c])),
        "U_zr": Tensor(np.array([[0.8], [-0.6]])),
        "U_c": Tensor(np.array([[1.3]])),
        "b": Tensor(np.zeros(3)),
    }
    a_z = w_z[0] * x[0] + w_z[1] * x[1]
    a_c = w_c[0] * x[0] + w_c[1] * x[1]
    z = 1.0 / (1.0 + math.exp(-a_z))
    expected = z * math.tanh(a_c)
    out = F.gru_step(Tensor(x), Tensor([0.0]), params)
    assert out.data[0] == pytest.approx(expected, abs=1e-15)


def test_gru_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    params = _gru_params(3, 4, rng)
    x = Tensor(rng.normal(size=(2, 3)))
    h = Tensor(rng.normal(size=(2, 4)))
    errs = grad_errors(lambda: F.gru_step(x, h, params).sum(), {**params, "x": x, "h": h})
    assert max(errs.values()) <= FD_RTOL, errs


def test_gru_mask_freezes_rows():
    rng = np.random.default_rng(2)
    params = _gru_params(3, 4, rng)
    h = rng.normal(size=(2, 4))
    out = F.gru_step(Tensor(rng.normal(size=(2, 3))), Tensor(h), params, mask=np.array([1.0, 0.0]))
    np.testing.assert_array_equal(out.data[1], h[1])
    assert not np.array_equal(out.data[0], h[0])


def test_gru_shape_mismatch():
    rng = np.random.default_rng(3)
    params = _gru_params(3, 4, rng)
    with pytest.raises(ShapeError):
        F.gru_step(Tensor(np.ones(5)), Tensor(np.zeros(4)), params)
    with pytest.raises(ShapeError):
        F.gru_step(Tensor(np.ones(3)), Tensor(np.zeros(6)), params)


# -- softmax ------------------------------------------------------------------------


def test_softmax_equal_logits_uniform():
    np.testing.assert_allclose(F.softmax(Tensor(np.full(5, 3.2))).data, np.full(5, 0.2), atol=1e-15)


def test_softmax_large_logits_no_overflow():
    out = F.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_high_precision_formula():
    import mpmath

    mpmath.mp.dps = 50
    den = sum(mpmath.e ** k for k in (1, 2, 3))
    expected = [float(mpmath.e ** k / den) for k in (1, 2, 3)]
    np.testing.assert_allclose(F.softmax(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1000, 1000)))
def test_softmax_sums_to_one(logits):
    out = F.softmax(Tensor(logits)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1.0) <= 1e-9


# -- losses -------------------------------------------------------------------------


def test_cross_entropy_examples():
    assert F.cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).item() == 0.0
    assert F.cross_entropy(Tensor(np.full(4, 0.25)), 2).item() == pytest.approx(math.log(4))
    assert F.cross_entropy(Tensor([0.7, 0.3]), 1).item() == pytest.approx(-math.log(0.3), rel=1e-12)


def test_cross_entropy_floor_and_errors():
    assert F.cross_entropy(Tensor([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))
    with pytest.raises(LabelError):
        F.cross_entropy(Tensor([0.5, 0.5]), 2)
    with pytest.raises(LabelError):
        F.cross_entropy(Tensor([0.5, 0.5]), -1)


def test_binary_cross_entropy_examples():
    assert F.binary_cross_entropy(Tensor([1.0, 0.0, 1.0]), [1, 0, 1]).item() == pytest.approx(0.0, abs=1e-11)
    assert F.binary_cross_entropy(Tensor(np.full(3, 0.5)), [1, 0, 0]).item() == pytest.approx(math.log(2))
    expected = (-math.log(0.9) - math.log(0.8)) / 2
    assert F.binary_cross_entropy(Tensor([0.9, 0.2]), [1, 0]).item() == pytest.approx(expected, rel=1e-12)


def test_binary_cross_entropy_rejects_soft_targets():
    with pytest.raises(LabelError):
        F.binary_cross_entropy(Tensor([0.5, 0.5]), [1, 0.3])
    with pytest.raises(ShapeError):
        F.binary_cross_entropy(Tensor([0.5, 0.5]), [1, 0, 1])


# -- backward -----------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(p.sum())
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(p * 2.0)


def test_backward_twice_doubles():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    loss = (T.tanh(p) * p).sum()
    backward(loss)
    once = p.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(p.grad, 2 * once)


def test_two_layer_network_gradients():
    rng = np.random.default_rng(4)
    W1, b1 = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=5))
    W2, b2 = Tensor(rng.normal(size=(4, 5))), Tensor(rng.normal(size=4))
    x = Tensor(rng.normal(size=(2, 3)))

    def loss():
        h = T.tanh(F.affine(x, W1, b1))
        return F.cross_entropy(F.softmax(F.affine(h, W2, b2)), np.array([1, 3])).mean()

    errs = grad_errors(loss, {"W1": W1, "b1": b1, "W2": W2, "b2": b2})
    assert max(errs.values()) <= FD_RTOL, errs


def test_unreachable_parameter_gets_zero_gradient():
    store = ParamStore()
    a = store.add("a", np.ones(2))
    b = store.add("b", np.ones(3))
    store.zero_grad()
    backward((a * 3.0).sum())
    np.testing.assert_array_equal(b.grad, np.zeros(3))




@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradients(name):
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=4))
    w = rng.normal(size=ELEMENTWISE[name](Tensor(rng.normal(size=4))).shape)
    errs = grad_errors(lambda: (ELEMENTWISE[name](a) * Tensor(w)).sum(), {"a": a})
    assert errs["a"] <= FD_RTOL


def test_gather_op_gradients():
    rng = np.random.default_rng(6)
    table = Tensor(rng.normal(size=(5, 3)))
    m = Tensor(rng.normal(size=(3, 4)))
    ids = np.array([4, 0, 4])

    def loss():
        rows = T.take_rows(table, ids)
        return T.log(T.pick(F.softmax(rows @ m), np.array([0, 3, 2])) + 0.1).sum()

    errs = grad_errors(loss, {"table": table, "m": m})
    assert max(errs.values()) <= FD_RTOL, errs


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=finite))
def test_gradient_accumulation_is_additive(u, v):
    p = Tensor(u, requires_grad=True)
    w = Tensor(v)
    l1 = lambda: (T.tanh(p) * w).sum()
    l2 = lambda: (p * p * w).sum()
    backward(l1() + l2())
    joint = p.grad.copy()
    p.zero_grad()
    backward(l1())
    backward(l2())
    np.testing.assert_allclose(joint, p.grad, atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite))
def test_forward_is_deterministic_and_finite(x):
    rng = np.random.default_rng(7)
    params = _gru_params(3, 3, rng)
    a = F.gru_step(Tensor(x), Tensor(np.zeros((2, 3))), params).data
    b = F.gru_step(Tensor(x), Tensor(np.zeros((2, 3))), params).data
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


# -- Adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    store.adam_update(0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_matches_hand_stepped_trace():
    store = ParamStore(clip_norm=None)
    p = store.add("p", np.array([0.0]))
    lr, g = 0.01, 0.3
    m = v = 0.0
    theta = 0.0
    for step in range(1, 4):
        p.grad = np.array([g])
        store.adam_update(lr)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= lr * (m / (1 - 0.9**step)) / (math.sqrt(v / (1 - 0.999**step)) + 1e-8)
        assert p.data[0] == pytest.approx(theta, abs=1e-15)
    # the first step is lr * sign(g) up to epsilon
    assert abs(-lr * (0.1 * g / 0.1) / (math.sqrt(0.001 * g * g / 0.001) + 1e-8) + lr) < 1e-7


def test_adam_descends_on_square():
    store = ParamStore()
    p = store.add("theta", np.array([1.0]))
    backward((p * p).sum())
    store.adam_update(0.1)
    assert p.data[0] < 1.0
    assert p.grad is not None and np.all(p.grad == 0)


def test_adam_missing_gradient_and_frozen():
    store = ParamStore()
    store.add("p", np.ones(2))
    store.zero_grad(set_to_none=True)
    with pytest.raises(ContractError):
        store.adam_update(0.1)
    store["p"].grad = np.ones(2)
    store.frozen = True
    with pytest.raises(ContractError):
        store.adam_update(0.1)


def test_adam_moments_track_shapes_and_steps():
    store = ParamStore()
    rng = np.random.default_rng(8)
    store.add_weight("W", (3, 2), rng)
    store.add_bias("b", 3)
    counts = []
    for _ in range(3):
        for t in store._params.values():
            t.grad = np.ones_like(t.data)
        store.adam_update(1e-3)
        counts.append(store.step_count)
    assert counts == [1, 2, 3]
    for name in ("W", "b"):
        m, v = store.moments(name)
        assert m.shape == store[name].shape == v.shape


def test_gradient_clip_caps_global_norm():
    store = ParamStore(clip_norm=1.0)
    p = store.add("p", np.zeros(2))
    p.grad = np.array([30.0, 40.0])
    store.adam_update(0.1)
    m, _ = store.moments("p")
    np.testing.assert_allclose(m, 0.1 * np.array([0.6, 0.8]))


def test_initialization_range_and_seed():
    a, b = ParamStore(), ParamStore()
    wa = a.add_weight("W", (20, 10), np.random.default_rng(3))
    wb = b.add_weight("W", (20, 10), np.random.default_rng(3))
    assert np.all(np.abs(wa.data) <= 0.08)
    assert np.array_equal(wa.data, wb.data)
    assert np.all(a.add_bias("b", 4).data == 0)
