"""Deterministic, training-free frame encoder.

Produces an 8-channel descriptor per grid cell: mean R/G/B, mean gradient
magnitude of the luminance, two position channels, and two constant bias
channels. All channels are non-negative by construction so the L1 affinity
normalization stays well defined.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import InputError
from .grids import FeatureGrid, pad_to_stride
from .validation import check_frame

# Rec. 601 luma coefficients.
_LUMA = np.array([0.299, 0.587, 0.114])


def _gradient_magnitude(lum):
    """Central differences with edge replication, per pixel."""
    padded = np.pad(lum, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


class FrameEncoder(BaseEstimator, TransformerMixin):
    """Hand-crafted per-cell feature extractor.

    Parameters
    ----------
    stride : int, default=8
        Pixels per grid cell. Frames are zero-padded on the bottom/right
        when their dimensions are not multiples of the stride.
    position_weight : float, default=0.5
        Scale applied to the two normalized cell-center position channels.
    normalize : bool, default=True
        If True, each cell's 8-vector is rescaled to unit L2 norm.
    """

    def __init__(self, stride=8, position_weight=0.5, normalize=True):
        self.stride = stride
        self.position_weight = position_weight
        self.normalize = normalize

    def fit(self, X=None, y=None):
        """No-op; the encoder has no trainable state."""
        return self

    def transform(self, frames):
        """Encode a sequence of frames into FeatureGrids."""
        return [self.encode(frame) for frame in frames]

    def encode(self, frame):
        """Encode one (H, W, 3) RGB frame in [0, 1] into a FeatureGrid."""
        if self.stride < 1:
            raise InputError(f"stride must be >= 1, got {self.stride}")
        if self.position_weight < 0:
            raise InputError(
                f"position_weight must be >= 0, got {self.position_weight}"
            )
        frame = check_frame("frame", frame)
        frame = pad_to_stride(frame, self.stride)
        s = self.stride
        grid_h, grid_w = frame.shape[0] // s, frame.shape[1] // s

        # Per-cell color means: (H, W, 3) -> (grid_h, grid_w, 3).
        cells = frame.reshape(grid_h, s, grid_w, s, 3)
        mean_rgb = cells.mean(axis=(1, 3))

        lum = frame @ _LUMA
        grad = _gradient_magnitude(lum)
        mean_grad = grad.reshape(grid_h, s, grid_w, s).mean(axis=(1, 3))

        w = float(self.position_weight)
        row_pos = (np.arange(grid_h) + 0.5) / grid_h * w
        col_pos = (np.arange(grid_w) + 0.5) / grid_w * w
        pos_r = np.broadcast_to(row_pos[:, None], (grid_h, grid_w))
        pos_c = np.broadcast_to(col_pos[None, :], (grid_h, grid_w))

        bias0 = np.full((grid_h, grid_w), 0.5)
        bias1 = np.full((grid_h, grid_w), min(max(1.0 - w, 0.0), 1.0))

        feats = np.stack(
            [
                mean_rgb[:, :, 0],
                mean_rgb[:, :, 1],
                mean_rgb[:, :, 2],
                mean_grad,
                pos_r,
                pos_c,
                bias0,
                bias1,
            ],
            axis=-1,
        )
        if self.normalize:
            norms = np.linalg.norm(feats, axis=-1)
            # Degenerate cells fall back to the unit vector along the first
            # bias channel (unreachable while that channel is fixed at 0.5,
            # kept as a guard for future channel layouts).
            dead = norms < 1e-30
            if np.any(dead):
                feats[dead] = 0.0
                feats[dead, 6] = 1.0
                norms = np.where(dead, 1.0, norms)
            feats = feats / norms[:, :, None]
        return FeatureGrid(feats, stride=s)
