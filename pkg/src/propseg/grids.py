"""Dense-grid and small-matrix primitives.

All arithmetic runs in 64-bit floats. Grids are indexed (row, col[, channel])
and flattened row-major: flat index i = row * W + col, the single convention
used everywhere in this library.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .validation import as_float_array, check_binary_mask, check_finite


@dataclass(frozen=True)
class FeatureGrid:
    """H x W x C feature grid at a fixed pixel stride of the source image."""

    data: np.ndarray  # (H, W, C) float64
    stride: int = 1

    def __post_init__(self):
        data = as_float_array("FeatureGrid.data", self.data, ndim=3)
        check_finite("FeatureGrid.data", data)
        if self.stride < 1:
            raise InputError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    def as_rows(self):
        """Flatten to (H*W, C), row-major over cells."""
        return self.data.reshape(-1, self.data.shape[2])


def matmul(a, b):
    """Matrix product with 64-bit accumulation.

    Raises ShapeError naming both shapes when inner dimensions disagree.
    """
    a = as_float_array("a", a, ndim=2)
    b = as_float_array("b", b, ndim=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def vectorize_mask(mask):
    """Row-major flattening of an H x W grid into an (H*W, 1) column."""
    m = as_float_array("mask", mask, ndim=2)
    return m.reshape(-1, 1)


def unvectorize_mask(vec, shape):
    """Inverse of vectorize_mask for a given (H, W) shape."""
    v = np.asarray(vec, dtype=np.float64)
    h, w = shape
    if v.size != h * w:
        raise ShapeError(f"vector of size {v.size} does not fill grid {(h, w)}")
    return v.reshape(h, w)


def elementwise_scale(features, weights):
    """Scale every channel of a FeatureGrid by a per-cell weight map.

    `weights` is an (H, W) grid (e.g. the object channel of an attention
    map), broadcast across channels.
    """
    w = as_float_array("weights", weights, ndim=2)
    if w.shape != (features.height, features.width):
        raise ShapeError(
            f"weights shape {w.shape} != grid shape "
            f"{(features.height, features.width)}"
        )
    return FeatureGrid(features.data * w[:, :, None], stride=features.stride)


def pad_to_stride(image, stride):
    """Zero-pad an image on the bottom/right to a multiple of `stride`."""
    if stride < 1:
        raise InputError(f"stride must be >= 1, got {stride}")
    h, w = image.shape[:2]
    ph = (-h) % stride
    pw = (-w) % stride
    if ph == 0 and pw == 0:
        return image
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad)


def downsample_binary(mask, out_shape):
    """Downsample a binary mask by area overlap, binarized at coverage >= 0.5.

    The input height/width must be integer multiples of the output shape.
    """
    m = check_binary_mask("mask", mask)
    out_h, out_w = out_shape
    h, w = m.shape
    if h % out_h or w % out_w:
        raise ShapeError(f"mask shape {m.shape} not divisible by {out_shape}")
    fh, fw = h // out_h, w // out_w
    means = m.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
    return (means >= 0.5).astype(np.float64)


def upsample_nearest(grid, out_shape):
    """Nearest-neighbor upsampling of an (H, W) grid to `out_shape`."""
    g = as_float_array("grid", grid, ndim=2)
    out_h, out_w = out_shape
    rows = np.minimum((np.arange(out_h) * g.shape[0]) // out_h, g.shape[0] - 1)
    cols = np.minimum((np.arange(out_w) * g.shape[1]) // out_w, g.shape[1] - 1)
    return g[np.ix_(rows, cols)]


def upsample_bilinear(grid, out_shape):
    """Bilinear upsampling of an (H, W) grid to `out_shape` (align corners
    to pixel centers)."""
    g = as_float_array("grid", grid, ndim=2)
    h, w = g.shape
    out_h, out_w = out_shape
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = g[np.ix_(y0, x0)] * (1 - wx) + g[np.ix_(y0, x1)] * wx
    bot = g[np.ix_(y1, x0)] * (1 - wx) + g[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def tight_box(mask):
    """Tight pixel bounding box (x1, y1, x2, y2), inclusive-exclusive, of the
    nonzero region of a mask. Raises InputError on an empty mask."""
    m = np.asarray(mask)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise InputError("cannot take the tight box of an empty mask")
    return (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
