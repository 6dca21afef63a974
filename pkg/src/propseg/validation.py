"""Input validation helpers shared across the library.

Every check either returns a float64 ndarray view of the input or raises
ShapeError / InputError with the offending values in the message.
"""

import numpy as np

from .errors import InputError, ShapeError


def as_float_array(name, arr, ndim=None):
    """Coerce to a float64 ndarray, optionally requiring a dimensionality."""
    out = np.asarray(arr, dtype=np.float64)
    if ndim is not None and out.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {out.shape}")
    return out


def check_finite(name, arr):
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_mask(name, mask):
    """Validate a real-valued mask grid with entries in [0, 1]."""
    m = as_float_array(name, mask, ndim=2)
    if m.size == 0:
        raise InputError(f"{name} is empty")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise InputError(
            f"{name} has values outside [0, 1] "
            f"(min={m.min():.6g}, max={m.max():.6g})"
        )
    return m


def check_binary_mask(name, mask):
    """Validate a mask whose entries are exactly 0 or 1; returns float64."""
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        return mask.astype(np.float64)
    m = as_float_array(name, mask, ndim=2)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise InputError(f"{name} is not binary (values other than 0/1 present)")
    return m


def check_same_shape(name_a, a, name_b, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(
            f"{name_a} shape {np.shape(a)} != {name_b} shape {np.shape(b)}"
        )


def check_positive(name, value):
    if not value > 0:
        raise InputError(f"{name} must be > 0, got {value!r}")
    return value


def check_unit_interval(name, value, open_ends=False):
    if open_ends:
        ok = 0.0 < value < 1.0
    else:
        ok = 0.0 <= value <= 1.0
    if not ok:
        raise InputError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_frame(name, frame):
    """Validate an RGB frame: (H, W, 3) float64 with channels in [0, 1]."""
    f = as_float_array(name, frame, ndim=3)
    if f.shape[0] == 0 or f.shape[1] == 0:
        raise InputError(f"{name} has zero-sized spatial dimensions {f.shape}")
    if f.shape[2] != 3:
        raise ShapeError(f"{name} must have 3 channels, got shape {f.shape}")
    if np.any(f < 0.0) or np.any(f > 1.0):
        raise InputError(f"{name} has channel values outside [0, 1]")
    return f
