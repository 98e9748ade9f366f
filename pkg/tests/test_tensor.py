import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from flowvfi.errors import ContractError, DimensionError
from flowvfi.tensor import (
    Tensor, backward, concat, elementwise, no_grad, split, tabs, tmean, tsum,
)
from oracles import central_diff

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_elementwise_mul_pointwise():
    out = elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
    np.testing.assert_array_equal(out.data, [8.0, 15.0])


def test_elementwise_add_zero():
    out = elementwise("add", Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [1.0, 1.0])


def test_elementwise_mul_ones_is_identity(rng):
    a = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(elementwise("mul", Tensor(a), Tensor(np.ones((3, 3)))).data, a)


def test_elementwise_channel_broadcast(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((1, 3, 1, 1))
    out = elementwise("mul", Tensor(a), Tensor(b))
    assert out.shape == a.shape
    np.testing.assert_array_equal(out.data, a * b)


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        elementwise("add", Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(DimensionError):
        # b may broadcast into a, not the other way round
        elementwise("add", Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3))))


def test_elementwise_unknown_kind():
    with pytest.raises(ValueError):
        elementwise("pow", Tensor([1.0]), Tensor([1.0]))


@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=4), elements=finite))
def test_broadcast_identities_exact(a):
    np.testing.assert_array_equal(elementwise("mul", Tensor(a), Tensor(np.ones((1,) * a.ndim))).data, a)
    np.testing.assert_array_equal(elementwise("add", Tensor(a), Tensor(np.zeros((1,) * a.ndim))).data, a)


def test_backward_linear(rng):
    x = rng.standard_normal(5)
    w = Tensor(rng.standard_normal(5), requires_grad=True)
    backward(tsum(w * x))
    np.testing.assert_allclose(w.grad, x, rtol=0, atol=0)


def test_backward_constant_loss():
    w = Tensor(np.ones(3), requires_grad=True)
    backward(tsum(w * 0.0))
    np.testing.assert_array_equal(w.grad, np.zeros(3))


def test_backward_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_backward_accumulates(rng):
    w = Tensor(rng.standard_normal(4), requires_grad=True)
    loss = tsum(w * w)
    backward(loss)
    once = w.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(w.grad, 2 * once)


def test_two_layer_mlp_matches_finite_differences(rng):
    x = rng.standard_normal((6, 4))
    w1 = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    w2 = Tensor(rng.standard_normal((5, 1)), requires_grad=True)

    def loss():
        h = Tensor(x[:, :, None]) * w1.reshape(1, 4, 5)
        h = tsum(h, axis=1)
        h = tabs(h) + h * 0.3  # piecewise-linear activation
        out = tsum(h.reshape(6, 5, 1) * w2.reshape(1, 5, 1), axis=1)
        return tmean(out * out)

    backward(loss())
    for p in (w1, w2):
        num = central_diff(lambda: loss().item(), p.data)
        rel = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-8)
        assert rel.max() < 1e-5


def test_shared_subexpression_gradient():
    # y = a*a + a: the tape must sum both paths into a
    a = Tensor(np.array([3.0]), requires_grad=True)
    backward(tsum(a * a + a))
    np.testing.assert_array_equal(a.grad, [7.0])


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        b = a * 2.0
    assert not b.requires_grad


def test_concat_split_roundtrip(rng):
    a = Tensor(rng.standard_normal((1, 4, 2, 2)), requires_grad=True)
    p, q = split(a, 2, axis=1)
    back = concat([p, q], axis=1)
    np.testing.assert_array_equal(back.data, a.data)
    backward(tsum(back * 2.0))
    np.testing.assert_array_equal(a.grad, np.full(a.shape, 2.0))
    with pytest.raises(DimensionError):
        split(a, 3, axis=1)
    with pytest.raises(DimensionError):
        concat([a, Tensor(np.zeros((1, 1, 3, 3)))], axis=1)


@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_forward_values_finite(a):
    t = Tensor(a)
    for out in (t * t, t + t, t - t, tabs(t), tmean(t)):
        assert np.all(np.isfinite(out.data))
