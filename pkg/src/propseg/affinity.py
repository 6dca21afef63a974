"""Inter-frame affinity, map propagation, and attention estimation.

The transition matrix between a previous frame and the current frame is the
pairwise dot product of their per-cell features: rows index current-frame
cells, columns index previous-frame cells. After row normalization each row
is a distribution over previous-frame cells, so multiplying by a vectorized
label map transports the labels into the current frame.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ContractError, InputError, ShapeError
from .grids import matmul, unvectorize_mask, vectorize_mask
from .validation import (
    as_float_array,
    check_binary_mask,
    check_positive,
    check_same_shape,
)

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class BoundingBox:
    """Pixel box [x1, x2) x [y1, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise InputError(
                f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2}); "
                "need 0 <= x1 < x2 and 0 <= y1 < y2"
            )

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)

    def clamped(self, image_width, image_height):
        """Clamp to image bounds; returns None when nothing remains."""
        x1 = max(self.x1, 0.0)
        y1 = max(self.y1, 0.0)
        x2 = min(self.x2, float(image_width))
        y2 = min(self.y2, float(image_height))
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2)


def box_iou(a, b):
    """Intersection over union of two boxes (tuples or BoundingBox)."""
    ax1, ay1, ax2, ay2 = a.as_tuple() if isinstance(a, BoundingBox) else a
    bx1, by1, bx2, by2 = b.as_tuple() if isinstance(b, BoundingBox) else b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass
class AffinityMatrix:
    """(H*W) x (H*W) transition weights between a frame pair.

    Rows index current-frame cells, columns previous-frame cells.
    """

    matrix: np.ndarray
    grid_shape: tuple
    normalized: bool = False
    mode: str = None

    def __post_init__(self):
        m = as_float_array("affinity", self.matrix, ndim=2)
        n = self.grid_shape[0] * self.grid_shape[1]
        if m.shape != (n, n):
            raise ShapeError(
                f"affinity shape {m.shape} does not match grid "
                f"{self.grid_shape} (expected {(n, n)})"
            )
        self.matrix = m

    @property
    def size(self):
        return self.matrix.shape[0]


@dataclass(frozen=True)
class AttentionMap:
    """Per-cell object-vs-background probabilities; channels sum to 1."""

    object_map: np.ndarray
    background_map: np.ndarray

    def __post_init__(self):
        obj = as_float_array("object_map", self.object_map, ndim=2)
        bg = as_float_array("background_map", self.background_map, ndim=2)
        check_same_shape("object_map", obj, "background_map", bg)
        if np.any(np.abs(obj + bg - 1.0) > ROW_SUM_TOL):
            raise InputError("attention channels do not sum to 1 per cell")
        object.__setattr__(self, "object_map", obj)
        object.__setattr__(self, "background_map", bg)

    @property
    def shape(self):
        return self.object_map.shape


def box_to_binary_map(box, grid_shape, stride):
    """Mark every grid cell whose pixel region overlaps the box.

    The box is clamped to the image (grid * stride) first; a box with zero
    area after clamping is an error.
    """
    h, w = grid_shape
    check_positive("stride", stride)
    clamped = box.clamped(w * stride, h * stride)
    if clamped is None:
        raise InputError(
            f"box {box.as_tuple()} does not intersect the "
            f"{w * stride}x{h * stride} image (empty map)"
        )
    # Cell (r, c) covers pixels [c*s, (c+1)*s) x [r*s, (r+1)*s); any overlap
    # counts.
    cols = np.arange(w) * stride
    rows = np.arange(h) * stride
    col_hit = (clamped.x1 < cols + stride) & (clamped.x2 > cols)
    row_hit = (clamped.y1 < rows + stride) & (clamped.y2 > rows)
    return (row_hit[:, None] & col_hit[None, :]).astype(np.float64)


def invert_map(mask):
    """Complement of a binary map: 1 - mask."""
    m = check_binary_mask("mask", mask)
    return 1.0 - m


def inter_frame_affinity(f_t, f_prev):
    """Unnormalized affinity: dot products between all cell pairs.

    W[i, j] = <feature of current cell i, feature of previous cell j>.
    """
    if (f_t.height, f_t.width, f_t.channels) != (
        f_prev.height,
        f_prev.width,
        f_prev.channels,
    ):
        raise ShapeError(
            f"feature grids disagree: {f_t.data.shape} vs {f_prev.data.shape}"
        )
    w = matmul(f_t.as_rows(), f_prev.as_rows().T)
    return AffinityMatrix(w, (f_t.height, f_t.width), normalized=False)


def normalize_affinity(aff, mode="l1", temperature=1.0, epsilon=1e-12):
    """Make every row a distribution over previous-frame cells.

    l1 mode clamps negative entries to 0 and divides each row by
    (row sum + epsilon); rows that were entirely <= 0 become uniform.
    softmax mode applies a temperature softmax per row (max-subtracted).
    """
    if aff.normalized:
        raise ContractError("affinity matrix is already normalized")
    check_positive("temperature", temperature)
    check_positive("epsilon", epsilon)
    m = aff.matrix
    if mode == "l1":
        clipped = np.maximum(m, 0.0)
        sums = clipped.sum(axis=1, keepdims=True)
        out = clipped / (sums + epsilon)
        dead = sums[:, 0] == 0.0
        if np.any(dead):
            out[dead] = 1.0 / m.shape[1]
    elif mode == "softmax":
        scaled = m / temperature
        scaled = scaled - scaled.max(axis=1, keepdims=True)
        e = np.exp(scaled)
        out = e / e.sum(axis=1, keepdims=True)
    else:
        raise InputError(f"unknown normalization mode {mode!r}")
    return AffinityMatrix(out, aff.grid_shape, normalized=True, mode=mode)


def propagate(aff, obj_map, bg_map):
    """Transport object and background maps through a normalized affinity.

    Returns per-cell object/background masses for the current frame, each a
    convex combination of the previous frame's map values.
    """
    if not aff.normalized:
        raise ContractError("propagate requires a normalized affinity matrix")
    h, w = aff.grid_shape
    obj = as_float_array("obj_map", obj_map, ndim=2)
    bg = as_float_array("bg_map", bg_map, ndim=2)
    if obj.shape != (h, w) or bg.shape != (h, w):
        raise ShapeError(
            f"maps {obj.shape}/{bg.shape} do not match affinity grid {(h, w)}"
        )
    a_obj = unvectorize_mask(matmul(aff.matrix, vectorize_mask(obj)), (h, w))
    a_bg = unvectorize_mask(matmul(aff.matrix, vectorize_mask(bg)), (h, w))
    # Rows are stochastic, so outputs are convex combinations; clip the
    # float dust so downstream range checks hold exactly.
    return np.clip(a_obj, 0.0, 1.0), np.clip(a_bg, 0.0, 1.0)


def attention_from_propagation(a_obj, a_bg, temperature=1.0):
    """Per-cell softmax over the propagated (object, background) pair."""
    check_positive("temperature", temperature)
    obj = as_float_array("a_obj", a_obj, ndim=2)
    bg = as_float_array("a_bg", a_bg, ndim=2)
    check_same_shape("a_obj", obj, "a_bg", bg)
    zo = obj / temperature
    zb = bg / temperature
    top = np.maximum(zo, zb)
    eo = np.exp(zo - top)
    eb = np.exp(zb - top)
    total = eo + eb
    return AttentionMap(eo / total, eb / total)


def propagate_attention(
    f_t,
    f_prev,
    box,
    mode="l1",
    affinity_temperature=1.0,
    attention_temperature=1.0,
    epsilon=1e-12,
):
    """Full propagation chain from a previous-frame box to a current-frame
    attention map: box map -> inverse map -> affinity -> row normalization
    -> propagation -> per-cell softmax."""
    aff = normalize_affinity(
        inter_frame_affinity(f_t, f_prev),
        mode=mode,
        temperature=affinity_temperature,
        epsilon=epsilon,
    )
    return attention_for_box(aff, box, f_prev.stride, attention_temperature)


def attention_for_box(aff, box, stride, attention_temperature=1.0):
    """Propagate one box through an already-normalized affinity matrix.

    Useful when several instances share a frame pair: the affinity is
    computed once and reused read-only for each box.
    """
    obj = box_to_binary_map(box, aff.grid_shape, stride)
    bg = invert_map(obj)
    a_obj, a_bg = propagate(aff, obj, bg)
    return attention_from_propagation(a_obj, a_bg, attention_temperature)


class AttentionPropagator(BaseEstimator):
    """Configured propagation operator (stateless, sklearn-style params).

    Parameters
    ----------
    mode : {'l1', 'softmax'}, default='l1'
        Row-normalization mode for the affinity matrix.
    affinity_temperature : float, default=1.0
        Softmax temperature for row normalization (softmax mode only).
    attention_temperature : float, default=1.0
        Temperature of the final object/background softmax.
    epsilon : float, default=1e-12
        Denominator guard for l1 row normalization.
    """

    def __init__(
        self,
        mode="l1",
        affinity_temperature=1.0,
        attention_temperature=1.0,
        epsilon=1e-12,
    ):
        self.mode = mode
        self.affinity_temperature = affinity_temperature
        self.attention_temperature = attention_temperature
        self.epsilon = epsilon

    def fit(self, X=None, y=None):
        """No-op; the propagator has no trainable state."""
        return self

    def affinity(self, f_t, f_prev):
        """Normalized affinity matrix for a frame pair."""
        return normalize_affinity(
            inter_frame_affinity(f_t, f_prev),
            mode=self.mode,
            temperature=self.affinity_temperature,
            epsilon=self.epsilon,
        )

    def attention(self, f_t, f_prev, box):
        """Attention map for one box, computing the affinity on the fly."""
        aff = self.affinity(f_t, f_prev)
        return attention_for_box(
            aff, box, f_prev.stride, self.attention_temperature
        )

    def attention_from_affinity(self, aff, box, stride):
        """Attention map for one box through a precomputed affinity."""
        return attention_for_box(aff, box, stride, self.attention_temperature)


# The hand-rolled encoder emits unit-norm features whose pairwise dots all
# land in a narrow band near 1, so l1 row normalization is close to uniform
# and propagation smears every map toward a constant.  A sharp softmax over
# the same dots restores contrast, and a sub-unit attention temperature
# sharpens the object/background split the head trains against.  These are
# the settings every pipeline entry point uses unless told otherwise.
PIPELINE_AFFINITY_MODE = "softmax"
PIPELINE_AFFINITY_TEMPERATURE = 0.01
PIPELINE_ATTENTION_TEMPERATURE = 0.25


def default_propagator():
    """Propagator configured for the bundled encoder's feature statistics."""
    return AttentionPropagator(
        mode=PIPELINE_AFFINITY_MODE,
        affinity_temperature=PIPELINE_AFFINITY_TEMPERATURE,
        attention_temperature=PIPELINE_ATTENTION_TEMPERATURE,
    )
