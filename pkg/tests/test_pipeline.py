import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowvfi.errors import ConfigurationError, DimensionError
from flowvfi.nn_ops import avg_pool2
from flowvfi.pipeline import (
    InterpolationModel, ModelConfig, backward_warp, downscale_flow, export_frame, loss_rec, loss_terms, loss_warp,
    model_forward, occlusion_blend, total_loss,
)
from flowvfi.tensor import Tensor, backward, tsum
import oracles

TINY = dict(L=3, heads=2, attn_width=4, feature_channels=2, encoder_channels=(2, 2, 2, 2), num_scales=3)


def tiny_model(**kw):
    return InterpolationModel(ModelConfig(**{**TINY, **kw}))


def perturb_zero_params(model, rng, scale=0.1):
    for p in model.parameters():
        if not p.data.any():
            p.data = rng.normal(0, scale, p.shape)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def test_warp_zero_flow_identity(rng):
    f = rng.uniform(size=(2, 3, 6, 7))
    assert np.array_equal(backward_warp(Tensor(f), np.zeros((2, 2, 6, 7))).data, f)


def test_warp_integer_shift(rng):
    f = rng.uniform(size=(1, 3, 5, 6))
    flow = np.zeros((1, 2, 5, 6))
    flow[:, 1] = 1.0
    out = backward_warp(Tensor(f), flow).data
    np.testing.assert_array_equal(out[..., :-1], f[..., 1:])
    # the last column clamps to the border
    np.testing.assert_array_equal(out[..., -1], f[..., -1])


def test_warp_half_pixel_averages_neighbours(rng):
    f = rng.uniform(size=(1, 3, 4, 5))
    flow = np.zeros((1, 2, 4, 5))
    flow[:, 1] = 0.5
    out = backward_warp(Tensor(f), flow).data
    np.testing.assert_allclose(out[..., :-1], 0.5 * (f[..., :-1] + f[..., 1:]), atol=1e-15)


def test_warp_matches_bilinear_oracle(rng):
    f = rng.uniform(size=(2, 3, 6, 5))
    flow = rng.uniform(-4, 4, size=(2, 2, 6, 5))
    np.testing.assert_allclose(backward_warp(Tensor(f), flow).data, oracles.backward_warp(f, flow), atol=1e-14)


@given(a=st.floats(-5, 5), seed=st.integers(0, 2 ** 31))
def test_warp_linear_in_frame(a, seed):
    rng = np.random.default_rng(seed)
    f = rng.uniform(size=(1, 3, 5, 5))
    flow = rng.uniform(-3, 3, size=(1, 2, 5, 5))
    np.testing.assert_allclose(backward_warp(Tensor(a * f), flow).data, a * backward_warp(Tensor(f), flow).data,
                               atol=1e-12)


def test_warp_gradients_reach_frame_and_flow(rng):
    f = Tensor(rng.uniform(size=(1, 2, 5, 5)), requires_grad=True)
    # keep samples away from integer cells and the border so every +-eps stays on one bilinear patch
    flow = Tensor(rng.uniform(0.2, 0.8, size=(1, 2, 5, 5)) * np.where(rng.uniform(size=(1, 2, 5, 5)) > 0.5, 1, -1),
                  requires_grad=True)
    w = rng.standard_normal((1, 2, 5, 5))
    backward(tsum(backward_warp(f, flow) * Tensor(w)))
    for t in (f, flow):
        num = oracles.central_diff(lambda: float(np.sum(backward_warp(Tensor(f.data), flow.data).data * w)), t.data)
        np.testing.assert_allclose(t.grad, num, rtol=1e-6, atol=1e-8)


def test_warp_shape_error():
    with pytest.raises(DimensionError):
        backward_warp(Tensor(np.zeros((1, 3, 4, 4))), np.zeros((1, 2, 4, 5)))


# ---------------------------------------------------------------------------
# flow downscaling and blending
# ---------------------------------------------------------------------------

def test_downscale_identity(rng):
    f = Tensor(rng.standard_normal((1, 2, 4, 4)))
    assert downscale_flow(f, 1) is f


def test_downscale_constant():
    f = np.zeros((1, 2, 4, 4))
    f[:, 0], f[:, 1] = 4.0, 2.0
    out = downscale_flow(Tensor(f), 2).data
    assert out.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(out[:, 0], 2.0)
    np.testing.assert_array_equal(out[:, 1], 1.0)


def test_downscale_pool_then_scale(rng):
    f = rng.standard_normal((1, 2, 8, 8))
    ref = f.reshape(1, 2, 2, 4, 2, 4).mean(axis=(3, 5)) / 4
    np.testing.assert_allclose(downscale_flow(Tensor(f), 4).data, ref, atol=1e-14)
    np.testing.assert_allclose(downscale_flow(Tensor(f), 4).data, avg_pool2(avg_pool2(Tensor(f))).data / 4,
                               atol=1e-15)


def test_downscale_rejects_non_power_of_two():
    with pytest.raises(ConfigurationError):
        downscale_flow(Tensor(np.zeros((1, 2, 6, 6))), 3)


def test_blend_examples(rng):
    a, b = rng.uniform(size=(1, 3, 4, 4)), rng.uniform(size=(1, 3, 4, 4))
    assert np.array_equal(occlusion_blend(Tensor(a), Tensor(b), Tensor(np.ones((1, 1, 4, 4)))).data, a)
    np.testing.assert_allclose(occlusion_blend(Tensor(a), Tensor(b), Tensor(np.full((1, 1, 4, 4), 0.5))).data,
                               (a + b) / 2, atol=1e-15)
    o = rng.uniform(size=(1, 1, 4, 4))
    np.testing.assert_allclose(occlusion_blend(Tensor(a), Tensor(b), Tensor(o)).data, o * a + (1 - o) * b,
                               atol=1e-15)


@given(seed=st.integers(0, 2 ** 31))
def test_blend_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    o = rng.uniform(size=(1, 1, 3, 3))
    c = rng.uniform(size=(1, 3, 3, 3))
    # blending a frame with itself returns it when the weights sum to one
    np.testing.assert_allclose(occlusion_blend(Tensor(c), Tensor(c), Tensor(o)).data, c, atol=1e-15)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_loss_examples(rng):
    g = rng.uniform(size=(1, 3, 4, 4))
    assert loss_warp(Tensor(g), Tensor(g), Tensor(g)).item() == 0.0
    half = Tensor(np.full((1, 3, 4, 4), 0.5))
    assert abs(loss_warp(half, Tensor(np.full((1, 3, 4, 4), 0.2)), Tensor(np.full((1, 3, 4, 4), 0.4))).item()
               - 0.2) < 1e-15
    assert loss_rec(Tensor(g), Tensor(g)).item() == 0.0
    assert abs(loss_rec(Tensor(g), Tensor(g + 0.1)).item() - 0.1) < 1e-15


def test_loss_formulas(rng):
    g, a, b = (rng.uniform(size=(2, 3, 4, 4)) for _ in range(3))
    assert abs(loss_warp(Tensor(g), Tensor(a), Tensor(b)).item() - np.mean(np.abs(g - (a + b) / 2))) < 1e-15
    assert abs(loss_rec(Tensor(g), Tensor(a)).item() - np.mean(np.abs(g - a))) < 1e-15


@given(seed=st.integers(0, 2 ** 31))
def test_l1_symmetric_under_negation(seed):
    rng = np.random.default_rng(seed)
    g, a = rng.standard_normal((1, 3, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    assert loss_rec(Tensor(g), Tensor(a)).item() == loss_rec(Tensor(-g), Tensor(-a)).item()


class _FakeOut:
    def __init__(self, w_prev, w_next, i_t):
        self.warped_prev, self.warped_next, self.I_t = w_prev, w_next, i_t


def test_total_loss_weights():
    cfg = ModelConfig(**TINY)
    g = Tensor(np.full((1, 3, 4, 4), 0.5))
    out = _FakeOut(Tensor(np.full((1, 3, 4, 4), 0.3)), Tensor(np.full((1, 3, 4, 4), 0.3)),
                   Tensor(np.full((1, 3, 4, 4), 0.6)))
    terms = loss_terms(g, out, cfg)
    assert abs(terms["warp"].item() - 0.2) < 1e-15
    assert abs(terms["rec"].item() - 0.1) < 1e-15
    assert abs(total_loss(g, out, cfg).item() - 0.25) < 1e-15
    zero = _FakeOut(g, g, g)
    assert total_loss(g, zero, cfg).item() == 0.0


def test_config_validation():
    for bad in (dict(num_scales=1), dict(lambda_rec=-1.0), dict(attn_width=6, heads=4), dict(heads=3, attn_width=6),
                dict(L=4)):
        with pytest.raises(ConfigurationError):
            ModelConfig(**{**TINY, **bad})
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def test_zero_heads_give_average_frame(rng):
    a, b = rng.uniform(size=(1, 3, 16, 16)), rng.uniform(size=(1, 3, 16, 16))
    out = model_forward(a, b, tiny_model())
    for f in out.flows:
        assert not f.data.any()
    assert np.array_equal(out.warped_prev.data, a) and np.array_equal(out.warped_next.data, b)
    np.testing.assert_array_equal(out.occlusion.data, 0.5)
    assert not out.delta.data.any()
    np.testing.assert_allclose(out.I_t.data, (a + b) / 2, atol=1e-15)


@pytest.mark.parametrize("size,batch", [(16, 1), (32, 2)])
def test_output_shapes_and_composition(rng, size, batch):
    m = tiny_model()
    perturb_zero_params(m, rng)
    a, b = rng.uniform(size=(batch, 3, size, size)), rng.uniform(size=(batch, 3, size, size))
    out = m(a, b)
    for t in (out.I_t, out.O_t, out.delta, out.warped_prev, out.warped_next):
        assert t.shape == (batch, 3, size, size)
    assert out.occlusion.shape == (batch, 1, size, size)
    # the composition is one addition with no rescaling
    assert np.array_equal(out.I_t.data, out.O_t.data + out.delta.data)
    frame = export_frame(out)
    assert frame.min() >= 0 and frame.max() <= 1


def test_scale_ladder(rng):
    m = tiny_model(num_scales=4, L=1)
    out = m(rng.uniform(size=(1, 3, 32, 32)), rng.uniform(size=(1, 3, 32, 32)))
    assert [f.shape[2] for f in out.scale_features] == [32, 16, 8, 4]
    assert all(f.shape[1] == 4 for f in out.scale_features)


def test_gradient_reaches_every_group(rng):
    m = tiny_model()
    perturb_zero_params(m, rng)
    a, b, g = (rng.uniform(size=(1, 3, 16, 16)) for _ in range(3))
    backward(total_loss(Tensor(g), m(a, b), m.cfg))
    for name, params in m.parameter_groups().items():
        norm = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
        assert norm > 0, name


def test_model_input_errors(rng):
    m = tiny_model()
    with pytest.raises(DimensionError):
        m(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 32, 16)))
    with pytest.raises(DimensionError):
        m(np.zeros((1, 3, 20, 16)), np.zeros((1, 3, 20, 16)))
    with pytest.raises(DimensionError):
        m(np.zeros((1, 1, 16, 16)), np.zeros((1, 1, 16, 16)))
    with pytest.raises(ConfigurationError):
        tiny_model(L=5)(np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 16)))
