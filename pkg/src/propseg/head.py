"""Attention-guided mask head: forward pass, losses, analytic gradients.

The head consumes a feature grid whose channels were already scaled by an
attention map, runs four same-padded 3x3 convolutions with ReLU, doubles the
resolution with a 2x2 stride-2 transposed convolution, and predicts a
per-cell foreground probability through a 1x1 convolution and a sigmoid.
All arithmetic is float64 so finite-difference checks have headroom.
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .affinity import AttentionMap
from .errors import InputError, ShapeError
from .grids import elementwise_scale
from .validation import (
    as_float_array,
    check_binary_mask,
    check_mask,
    check_same_shape,
)

# Probabilities are clamped before the log in both losses.
PROB_CLAMP = 1e-7
# Keeps sigmoid outputs strictly inside (0, 1) even when float64 saturates.
SIGMOID_CLAMP = 1e-12

N_CONV_BLOCKS = 4
PARAM_BLOCK_COUNT = 2 * N_CONV_BLOCKS + 4


@dataclass
class HeadParams:
    """Weights of the mask head.

    Kernels are laid out (kh, kw, c_in, c_out). The four 3x3 convolutions
    may widen once (input channels -> hidden width); the transposed
    convolution and the 1x1 predictor keep the hidden width.
    """

    conv_weights: tuple
    conv_biases: tuple
    deconv_weight: np.ndarray
    deconv_bias: np.ndarray
    pred_weight: np.ndarray
    pred_bias: np.ndarray

    def __post_init__(self):
        if len(self.conv_weights) != N_CONV_BLOCKS:
            raise ShapeError(
                f"expected {N_CONV_BLOCKS} convolution kernels, "
                f"got {len(self.conv_weights)}"
            )
        if len(self.conv_biases) != N_CONV_BLOCKS:
            raise ShapeError(
                f"expected {N_CONV_BLOCKS} convolution biases, "
                f"got {len(self.conv_biases)}"
            )
        self.conv_weights = tuple(
            as_float_array(f"conv_weights[{k}]", w, ndim=4)
            for k, w in enumerate(self.conv_weights)
        )
        self.conv_biases = tuple(
            as_float_array(f"conv_biases[{k}]", b, ndim=1)
            for k, b in enumerate(self.conv_biases)
        )
        self.deconv_weight = as_float_array(
            "deconv_weight", self.deconv_weight, ndim=4
        )
        self.deconv_bias = as_float_array("deconv_bias", self.deconv_bias, ndim=1)
        self.pred_weight = as_float_array("pred_weight", self.pred_weight, ndim=4)
        self.pred_bias = as_float_array("pred_bias", self.pred_bias, ndim=1)

        width = self.conv_weights[0].shape[2]
        for k, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            if w.shape[:2] != (3, 3):
                raise ShapeError(f"conv_weights[{k}] kernel is {w.shape[:2]}, not 3x3")
            if w.shape[2] != width:
                raise ShapeError(
                    f"conv_weights[{k}] expects {w.shape[2]} input channels, "
                    f"previous block emits {width}"
                )
            width = w.shape[3]
            if b.shape != (width,):
                raise ShapeError(
                    f"conv_biases[{k}] has shape {b.shape}, expected ({width},)"
                )
        if self.deconv_weight.shape != (2, 2, width, width):
            raise ShapeError(
                f"deconv_weight has shape {self.deconv_weight.shape}, "
                f"expected (2, 2, {width}, {width})"
            )
        if self.deconv_bias.shape != (width,):
            raise ShapeError(
                f"deconv_bias has shape {self.deconv_bias.shape}, "
                f"expected ({width},)"
            )
        if self.pred_weight.shape != (1, 1, width, 1):
            raise ShapeError(
                f"pred_weight has shape {self.pred_weight.shape}, "
                f"expected (1, 1, {width}, 1)"
            )
        if self.pred_bias.shape != (1,):
            raise ShapeError(
                f"pred_bias has shape {self.pred_bias.shape}, expected (1,)"
            )

    @property
    def in_channels(self):
        return self.conv_weights[0].shape[2]

    @property
    def hidden_channels(self):
        return self.deconv_weight.shape[2]

    def named_arrays(self):
        """(name, array) pairs in the canonical serialization order."""
        items = []
        for k in range(N_CONV_BLOCKS):
            items.append((f"conv{k}_w", self.conv_weights[k]))
            items.append((f"conv{k}_b", self.conv_biases[k]))
        items.append(("deconv_w", self.deconv_weight))
        items.append(("deconv_b", self.deconv_bias))
        items.append(("pred_w", self.pred_weight))
        items.append(("pred_b", self.pred_bias))
        return items

    @classmethod
    def from_arrays(cls, arrays):
        """Rebuild from arrays listed in named_arrays() order."""
        arrays = list(arrays)
        if len(arrays) != PARAM_BLOCK_COUNT:
            raise ShapeError(
                f"expected {PARAM_BLOCK_COUNT} parameter blocks, got {len(arrays)}"
            )
        n = 2 * N_CONV_BLOCKS
        return cls(
            conv_weights=tuple(arrays[0:n:2]),
            conv_biases=tuple(arrays[1:n:2]),
            deconv_weight=arrays[n],
            deconv_bias=arrays[n + 1],
            pred_weight=arrays[n + 2],
            pred_bias=arrays[n + 3],
        )

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def map(self, fn, *others):
        """Apply fn leafwise across this and optional same-shaped params."""
        columns = [self.named_arrays()] + [o.named_arrays() for o in others]
        out = []
        for leaves in zip(*columns):
            name = leaves[0][0]
            arrays = [arr for _, arr in leaves]
            for arr in arrays[1:]:
                if arr.shape != arrays[0].shape:
                    raise ShapeError(
                        f"{name}: shapes {arrays[0].shape} and {arr.shape} differ"
                    )
            out.append(fn(*arrays))
        return HeadParams.from_arrays(out)


def init_head_params(in_channels=8, hidden_channels=16, seed=0):
    """Deterministic initialization: fan-in-scaled uniform weights, zero biases.

    Each weight is drawn uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)] where
    fan_in is the number of terms summed per output value.
    """
    if in_channels < 1 or hidden_channels < 1:
        raise InputError("channel counts must be >= 1")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        limit = math.sqrt(1.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape)

    conv_w, conv_b = [], []
    width = in_channels
    for _ in range(N_CONV_BLOCKS):
        conv_w.append(uniform((3, 3, width, hidden_channels), 9 * width))
        conv_b.append(np.zeros(hidden_channels))
        width = hidden_channels
    return HeadParams(
        conv_weights=tuple(conv_w),
        conv_biases=tuple(conv_b),
        # each transposed-conv output cell sums over the input channels only
        deconv_weight=uniform((2, 2, width, width), width),
        deconv_bias=np.zeros(width),
        pred_weight=uniform((1, 1, width, 1), width),
        pred_bias=np.zeros(1),
    )


@dataclass(frozen=True)
class LossReport:
    """Loss values for one forward pass; total = mask + weight * attention."""

    mask_loss: float
    attention_loss: float
    attention_weight: float
    total: float

    def __post_init__(self):
        for name in ("mask_loss", "attention_loss", "attention_weight", "total"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InputError(f"{name} is not finite: {v}")
        if self.mask_loss < 0 or self.attention_loss < 0:
            raise InputError("loss terms must be non-negative")

    @classmethod
    def compute(cls, mask_loss, attention_loss, attention_weight):
        mask_loss = float(mask_loss)
        attention_loss = float(attention_loss)
        attention_weight = float(attention_weight)
        return cls(
            mask_loss=mask_loss,
            attention_loss=attention_loss,
            attention_weight=attention_weight,
            total=mask_loss + attention_weight * attention_loss,
        )


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _pad1(x):
    return np.pad(x, ((1, 1), (1, 1), (0, 0)))


def _conv3x3(x, w, b):
    # x (H,W,Ci) -> z (H,W,Co); patches kept for the backward pass
    patches = sliding_window_view(_pad1(x), (3, 3), axis=(0, 1))
    z = np.einsum("hwcij,ijcd->hwd", patches, w, optimize=True) + b
    return z, patches

def _conv3x3_grads(dz, patches, w):
    dw = np.einsum("hwcij,hwd->ijcd", patches, dz, optimize=True)
    db = dz.sum(axis=(0, 1))
    back = sliding_window_view(_pad1(dz), (3, 3), axis=(0, 1))
    dx = np.einsum("hwdij,ijcd->hwc", back, w[::-1, ::-1], optimize=True)
    return dx, dw, db


def _deconv2x2(x, w, b):
    # kernel size equals stride, so each input cell fills its own 2x2 block
    h, wd, _ = x.shape
    t = np.einsum("hwc,ijcd->hiwjd", x, w, optimize=True)
    return t.reshape(2 * h, 2 * wd, w.shape[3]) + b

def _deconv2x2_grads(dz, x, w):
    h, wd, _ = x.shape
    dt = dz.reshape(h, 2, wd, 2, dz.shape[2])
    dw = np.einsum("hwc,hiwjd->ijcd", x, dt, optimize=True)
    db = dz.sum(axis=(0, 1))
    dx = np.einsum("hiwjd,ijcd->hwc", dt, w, optimize=True)
    return dx, dw, db


def _run_head(params, x):
    """Forward on raw (H, W, C) data, keeping intermediates for backprop."""
    conv_cache = []
    h = x
    for w, b in zip(params.conv_weights, params.conv_biases):
        z, patches = _conv3x3(h, w, b)
        conv_cache.append((patches, z))
        h = np.maximum(z, 0.0)
    dec = _deconv2x2(h, params.deconv_weight, params.deconv_bias)
    logits = dec @ params.pred_weight[0, 0, :, 0] + params.pred_bias[0]
    s = _sigmoid(logits)
    out = np.clip(s, SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    return out, (conv_cache, h, dec, s)


def _check_channels(params, features):
    if features.channels != params.in_channels:
        raise ShapeError(
            f"features have {features.channels} channels, head expects "
            f"{params.in_channels}"
        )


def head_forward(params, features):
    """Predict a foreground-probability grid at twice the feature resolution.

    Output shape is (2H, 2W) for an (H, W) feature grid, every value
    strictly inside (0, 1).
    """
    _check_channels(params, features)
    out, _ = _run_head(params, features.data)
    return out


def attended_forward(params, features, attention):
    """Scale features by the attention's object channel, then run the head."""
    guided = elementwise_scale(features, attention.object_map)
    return head_forward(params, guided)


def mask_loss(pred, gt):
    """Mean binary cross-entropy with probabilities clamped away from {0, 1}."""
    p = check_mask("pred", pred)
    g = check_binary_mask("gt", gt)
    check_same_shape("pred", p, "gt", g)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))))


def attention_loss(attention, gt, mode="standard"):
    """Cross-entropy between the attention's object channel and a target map.

    standard mode is mean binary cross-entropy. literal mode squares the
    positive-class weight; the two coincide exactly on {0, 1} targets and
    differ only for soft ones.
    """
    if not isinstance(attention, AttentionMap):
        raise InputError("attention must be an AttentionMap")
    g = check_mask("gt", gt)
    p = attention.object_map
    check_same_shape("attention.object_map", p, "gt", g)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if mode == "standard":
        w_pos = g
    elif mode == "literal":
        w_pos = g * g
    else:
        raise InputError(f"unknown attention loss mode {mode!r}")
    return float(np.mean(-(w_pos * np.log(pc) + (1.0 - g) * np.log(1.0 - pc))))


def head_gradients(
    params,
    features,
    attention,
    gt_mask,
    gt_attention,
    attention_weight=1.0,
    mode="standard",
):
    """Analytic gradients of mask_loss + weight * attention_loss w.r.t. params.

    Returns (gradients shaped like params, LossReport). The attention map is
    an input rather than a parameter, so the attention term is constant in
    the head parameters and contributes zero gradient; it still appears in
    the report.
    """
    guided = elementwise_scale(features, attention.object_map)
    _check_channels(params, guided)
    out, (conv_cache, relu_out, dec, s) = _run_head(params, guided.data)

    g = check_binary_mask("gt_mask", gt_mask)
    check_same_shape("prediction", out, "gt_mask", g)
    report = LossReport.compute(
        mask_loss(out, g),
        attention_loss(attention, gt_attention, mode),
        attention_weight,
    )

    n = out.size
    pc = np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
    d_pc = (pc - g) / (pc * (1.0 - pc)) / n
    # clamps are flat outside their window, so gradients stop there
    d_out = np.where((out > PROB_CLAMP) & (out < 1.0 - PROB_CLAMP), d_pc, 0.0)
    d_s = np.where((s > SIGMOID_CLAMP) & (s < 1.0 - SIGMOID_CLAMP), d_out, 0.0)
    d_logits = d_s * s * (1.0 - s)

    pw = params.pred_weight[0, 0, :, 0]
    d_pred_w = np.einsum("hwc,hw->c", dec, d_logits).reshape(1, 1, -1, 1)
    d_pred_b = np.array([d_logits.sum()])
    d_dec = d_logits[:, :, None] * pw

    d_h, d_deconv_w, d_deconv_b = _deconv2x2_grads(
        d_dec, relu_out, params.deconv_weight
    )

    d_conv_w = [None] * N_CONV_BLOCKS
    d_conv_b = [None] * N_CONV_BLOCKS
    for k in range(N_CONV_BLOCKS - 1, -1, -1):
        patches, z = conv_cache[k]
        dz = d_h * (z > 0.0)
        d_h, d_conv_w[k], d_conv_b[k] = _conv3x3_grads(
            dz, patches, params.conv_weights[k]
        )

    grads = HeadParams(
        conv_weights=tuple(d_conv_w),
        conv_biases=tuple(d_conv_b),
        deconv_weight=d_deconv_w,
        deconv_bias=d_deconv_b,
        pred_weight=d_pred_w,
        pred_bias=d_pred_b,
    )
    return grads, report
