"""Input validation helpers.

All pixel data flows through the toolkit as plain numpy arrays with fixed
conventions:

* face image  -- float32, shape (H, W, 3), values in [0, 1], RGB order
* noise field -- float32, shape (H, W, 3), signed
* binary mask -- uint8, shape (H, W), values in {0, 1}
* label map   -- uint8, shape (H, W), values in [0, 10]

The ``check_*`` functions validate and normalize dtype/layout, mirroring
sklearn's ``check_array`` idiom: they return the validated array and raise
a typed error otherwise.
"""

import numpy as np

from .errors import DimensionError, FormatError

NUM_LABELS = 11


def check_image(img, name="image"):
    """Validate a single face image; returns a float32 (H, W, 3) array in [0, 1]."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise FormatError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise FormatError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def check_image_batch(X, name="X"):
    """Validate a batch of face images; returns a float32 (N, H, W, 3) array."""
    arr = np.asarray(X)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise DimensionError(f"{name} must have shape (N, H, W, 3), got {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise FormatError(f"{name} values must lie in [0, 1]")
    return arr


def check_noise(noise, image_shape=None, name="noise"):
    """Validate a signed noise field; optionally against a paired image shape."""
    arr = np.asarray(noise)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if image_shape is not None and tuple(arr.shape) != tuple(image_shape):
        raise DimensionError(
            f"{name} shape {arr.shape} does not match paired image {tuple(image_shape)}"
        )
    return np.ascontiguousarray(arr, dtype=np.float32)


def check_mask(mask, spatial_shape=None, name="mask"):
    """Validate a binary mask; returns a uint8 (H, W) array of exactly {0, 1}."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise FormatError(f"{name} values must be exactly 0 or 1")
    if spatial_shape is not None and tuple(arr.shape) != tuple(spatial_shape):
        raise DimensionError(
            f"{name} shape {arr.shape} does not match expected {tuple(spatial_shape)}"
        )
    return np.ascontiguousarray(arr, dtype=np.uint8)


def check_label_map(labels, spatial_shape=None, name="label map"):
    """Validate a facial-region label map; values must lie in [0, 10]."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (H, W), got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= NUM_LABELS):
        raise FormatError(
            f"{name} values must lie in [0, {NUM_LABELS - 1}], "
            f"got range [{arr.min()}, {arr.max()}]"
        )
    if spatial_shape is not None and tuple(arr.shape) != tuple(spatial_shape):
        raise DimensionError(
            f"{name} shape {arr.shape} does not match expected {tuple(spatial_shape)}"
        )
    return np.ascontiguousarray(arr, dtype=np.uint8)


def check_same_spatial(a, b, names=("first", "second")):
    """Raise unless the two arrays agree on their leading (H, W) dims."""
    if a.shape[:2] != b.shape[:2]:
        raise DimensionError(
            f"{names[0]} spatial shape {a.shape[:2]} does not match "
            f"{names[1]} spatial shape {b.shape[:2]}"
        )
