"""Mask head forward pass, losses, and analytic gradients."""

import math

import numpy as np
import pytest

import reference
from propseg.affinity import AttentionMap
from propseg.errors import InputError, ShapeError
from propseg.grids import FeatureGrid, elementwise_scale
from propseg.head import (
    HeadParams,
    attended_forward,
    attention_loss,
    head_forward,
    head_gradients,
    init_head_params,
    mask_loss,
)


def zero_params(in_channels=2, hidden=3):
    widths = [in_channels] + [hidden] * 4
    return HeadParams(
        conv_weights=tuple(
            np.zeros((3, 3, widths[i], widths[i + 1])) for i in range(4)
        ),
        conv_biases=tuple(np.zeros(hidden) for _ in range(4)),
        deconv_weight=np.zeros((2, 2, hidden, hidden)),
        deconv_bias=np.zeros(hidden),
        pred_weight=np.zeros((1, 1, hidden, 1)),
        pred_bias=np.zeros(1),
    )


def grid(data, stride=8):
    return FeatureGrid(np.asarray(data, dtype=np.float64), stride=stride)


def attention_of(obj):
    obj = np.asarray(obj, dtype=np.float64)
    return AttentionMap(object_map=obj, background_map=1.0 - obj)


# ---------------------------------------------------------------------------
# forward


def test_zero_parameters_output_exactly_half(rng):
    params = zero_params()
    out = head_forward(params, grid(rng.uniform(size=(3, 3, 2))))
    assert np.all(out == 0.5)


def test_output_shape_doubles_input():
    params = init_head_params(in_channels=8, hidden_channels=4)
    out = head_forward(params, grid(np.zeros((16, 16, 8))))
    assert out.shape == (32, 32)


def test_output_strictly_inside_unit_interval(rng):
    params = init_head_params(in_channels=2, hidden_channels=4, seed=3)
    big = grid(rng.uniform(size=(4, 4, 2)) * 50.0)
    out = head_forward(params, big)
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_single_cell_scalar_chain():
    # one input cell, one channel everywhere: the whole network collapses
    # to scalars that can be chained by hand
    p = zero_params(in_channels=1, hidden=1)
    for k in range(4):
        p.conv_weights[k][1, 1, 0, 0] = 2.0 if k == 0 else 1.0
        p.conv_biases[k][0] = 0.5 if k == 0 else 0.0
    p.deconv_weight[:, :, 0, 0] = [[1.0, 2.0], [3.0, 4.0]]
    p.deconv_bias[0] = 0.25
    p.pred_weight[0, 0, 0, 0] = 0.5
    p.pred_bias[0] = -1.0

    x = 0.75
    h = max(2.0 * x + 0.5, 0.0)      # conv block 1
    for _ in range(3):
        h = max(h, 0.0)              # identity blocks keep the value
    dec = np.array([[1.0, 2.0], [3.0, 4.0]]) * h + 0.25
    logits = dec * 0.5 - 1.0
    want = 1.0 / (1.0 + np.exp(-logits))

    out = head_forward(p, grid([[[x]]]))
    assert out.shape == (2, 2)
    assert np.allclose(out, want, atol=1e-12)


def test_forward_matches_loop_reference(rng):
    params = init_head_params(in_channels=2, hidden_channels=3, seed=11)
    feats = grid(rng.uniform(size=(3, 4, 2)))
    got = head_forward(params, feats)
    want = reference.head_forward_loops(params, feats.data)
    assert np.allclose(got, want, atol=1e-12)


def test_forward_rejects_channel_mismatch():
    params = init_head_params(in_channels=4, hidden_channels=3)
    with pytest.raises(ShapeError):
        head_forward(params, grid(np.zeros((2, 2, 7))))


def test_attended_forward_is_scale_then_forward(rng):
    params = init_head_params(in_channels=2, hidden_channels=3, seed=5)
    feats = grid(rng.uniform(size=(3, 3, 2)))
    att = attention_of(rng.uniform(size=(3, 3)))
    want = head_forward(params, elementwise_scale(feats, att.object_map))
    got = attended_forward(params, feats, att)
    assert np.array_equal(got, want)


def test_attended_forward_extreme_attention(rng):
    params = init_head_params(in_channels=2, hidden_channels=3, seed=5)
    feats = grid(rng.uniform(size=(2, 2, 2)))
    off = attended_forward(params, feats, attention_of(np.zeros((2, 2))))
    assert np.array_equal(
        off, head_forward(params, grid(np.zeros((2, 2, 2))))
    )
    on = attended_forward(params, feats, attention_of(np.ones((2, 2))))
    assert np.array_equal(on, head_forward(params, feats))


# ---------------------------------------------------------------------------
# losses


def test_mask_loss_half_prediction_is_log_two(rng):
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    assert mask_loss(np.full((4, 4), 0.5), gt) == pytest.approx(math.log(2))


def test_mask_loss_perfect_prediction_is_tiny():
    gt = np.array([[1.0, 0.0]])
    pred = np.array([[1.0 - 1e-9, 1e-9]])
    assert mask_loss(pred, gt) < 2e-6 * 16.12


def test_mask_loss_hand_value():
    got = mask_loss(np.array([[0.9, 0.2]]), np.array([[1.0, 0.0]]))
    want = (-math.log(0.9) - math.log(0.8)) / 2
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.1643, abs=5e-5)


def test_mask_loss_matches_loop_reference(rng):
    pred = rng.uniform(0.01, 0.99, size=(5, 6))
    gt = (rng.uniform(size=(5, 6)) > 0.4).astype(np.float64)
    assert mask_loss(pred, gt) == pytest.approx(
        reference.bce_loops(pred, gt), abs=1e-12
    )


def test_mask_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        mask_loss(np.full((2, 2), 0.5), np.zeros((2, 3)))


def test_attention_loss_hand_value():
    att = attention_of(np.array([[0.7, 0.3]]))
    got = attention_loss(att, np.array([[1.0, 0.0]]))
    want = (-math.log(0.7) - math.log(0.7)) / 2
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.3567, abs=5e-5)


def test_attention_loss_half_is_log_two(rng):
    gt = (rng.uniform(size=(3, 3)) > 0.5).astype(np.float64)
    att = attention_of(np.full((3, 3), 0.5))
    assert attention_loss(att, gt) == pytest.approx(math.log(2))


def test_literal_mode_equals_standard_on_binary_targets(rng):
    att = attention_of(rng.uniform(0.05, 0.95, size=(4, 4)))
    gt = (rng.uniform(size=(4, 4)) > 0.5).astype(np.float64)
    assert attention_loss(att, gt, "standard") == attention_loss(
        att, gt, "literal"
    )


def test_literal_mode_differs_on_soft_targets():
    att = attention_of(np.array([[0.6]]))
    soft = np.array([[0.5]])
    assert attention_loss(att, soft, "standard") != attention_loss(
        att, soft, "literal"
    )


def test_attention_loss_rejects_unknown_mode(rng):
    att = attention_of(np.full((2, 2), 0.5))
    with pytest.raises(InputError):
        attention_loss(att, np.zeros((2, 2)), mode="other")


# ---------------------------------------------------------------------------
# gradients


def fixture_inputs(rng, gh=4, gw=4, channels=2):
    feats = grid(rng.uniform(size=(gh, gw, channels)))
    att = attention_of(rng.uniform(0.05, 0.95, size=(gh, gw)))
    gt_mask = (rng.uniform(size=(2 * gh, 2 * gw)) > 0.5).astype(np.float64)
    gt_att = (rng.uniform(size=(gh, gw)) > 0.5).astype(np.float64)
    return feats, att, gt_mask, gt_att


def test_zero_weight_params_have_closed_form_bias_gradient(rng):
    # with every weight zero the output is sigmoid(pred_bias) everywhere,
    # so dL/d pred_bias = mean(p - g) and all other gradients vanish
    feats, att, gt_mask, gt_att = fixture_inputs(rng)
    params = zero_params(in_channels=2, hidden=3)
    grads, report = head_gradients(params, feats, att, gt_mask, gt_att)
    want = float(np.mean(0.5 - gt_mask))
    assert grads.pred_bias[0] == pytest.approx(want, abs=1e-12)
    for k in range(4):
        assert np.allclose(grads.conv_weights[k], 0.0)
    assert np.allclose(grads.deconv_weight, 0.0)
    assert np.allclose(grads.pred_weight, 0.0)
    assert report.mask_loss == pytest.approx(math.log(2))


def test_gradients_match_finite_differences(rng):
    from propseg.training import finite_difference_errors

    feats, att, gt_mask, gt_att = fixture_inputs(rng)
    params = init_head_params(in_channels=2, hidden_channels=4, seed=9)
    worst, checked, skipped = finite_difference_errors(
        params, feats, att, gt_mask, gt_att
    )
    assert checked > 0
    assert worst <= 1e-4


def test_attention_weight_scales_total_linearly(rng):
    feats, att, gt_mask, gt_att = fixture_inputs(rng)
    params = init_head_params(in_channels=2, hidden_channels=3, seed=2)
    _, r1 = head_gradients(params, feats, att, gt_mask, gt_att,
                           attention_weight=1.0)
    _, r2 = head_gradients(params, feats, att, gt_mask, gt_att,
                           attention_weight=2.0)
    assert r2.attention_loss == r1.attention_loss
    assert r2.total - r2.mask_loss == pytest.approx(
        2.0 * (r1.total - r1.mask_loss), rel=1e-12
    )
    assert r1.total == pytest.approx(
        r1.mask_loss + 1.0 * r1.attention_loss, rel=1e-12
    )


def test_param_gradients_ignore_attention_term(rng):
    # the attention map is an input, so changing its loss weight must not
    # move any parameter gradient
    feats, att, gt_mask, gt_att = fixture_inputs(rng)
    params = init_head_params(in_channels=2, hidden_channels=3, seed=4)
    g1, _ = head_gradients(params, feats, att, gt_mask, gt_att,
                           attention_weight=0.0)
    g2, _ = head_gradients(params, feats, att, gt_mask, gt_att,
                           attention_weight=7.5)
    assert np.array_equal(g1.pred_bias, g2.pred_bias)
    for k in range(4):
        assert np.array_equal(g1.conv_weights[k], g2.conv_weights[k])


def test_saturated_correct_predictions_have_tiny_gradients():
    # drive the head to confident, correct outputs: gradients ~ clamp slack
    params = zero_params(in_channels=1, hidden=1)
    params.pred_bias[0] = 40.0    # sigmoid saturates to the clamp value
    feats = grid(np.ones((2, 2, 1)))
    att = attention_of(np.ones((2, 2)))
    gt = np.ones((4, 4))
    grads, report = head_gradients(params, feats, att, gt, np.ones((2, 2)))
    assert abs(grads.pred_bias[0]) <= 1e-6
    assert report.mask_loss <= 1e-6


def test_init_is_deterministic_and_fan_in_bounded():
    a = init_head_params(in_channels=8, hidden_channels=16, seed=0)
    b = init_head_params(in_channels=8, hidden_channels=16, seed=0)
    assert np.array_equal(a.conv_weights[0], b.conv_weights[0])
    assert np.array_equal(a.deconv_weight, b.deconv_weight)
    limit0 = math.sqrt(1.0 / (9 * 8))
    assert np.max(np.abs(a.conv_weights[0])) <= limit0
    assert np.all(a.conv_biases[0] == 0.0)
    c = init_head_params(in_channels=8, hidden_channels=16, seed=1)
    assert not np.array_equal(a.conv_weights[0], c.conv_weights[0])
