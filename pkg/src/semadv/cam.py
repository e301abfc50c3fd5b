"""Class activation maps over forgery detectors.

Two weighting modes sit behind one operation: classifier-weight CAM for
models with a global-average-pool head, and gradient-derived (Grad-CAM)
channel weights for anything else. Maps are combined with a ReLU, bilinearly
upsampled to image resolution, then min-max normalized to [0, 1].
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigurationError, DimensionError
from .validation import check_image, check_same_spatial


@dataclass(frozen=True)
class ActivationMap:
    """Normalized spatial attention for one class of one model.

    values: float32 (H, W) in [0, 1]; max is 1 unless the raw map was all-zero.
    """

    values: np.ndarray
    class_index: int
    source_model: str

    @property
    def shape(self):
        return self.values.shape


def normalize_minmax(raw):
    """Min-max normalize a non-negative map to [0, 1].

    All-zero maps stay all-zero; constant positive maps normalize to all-ones
    so the "max == 1 unless identically zero" contract holds.
    """
    raw = np.asarray(raw, dtype=np.float32)
    hi = raw.max()
    lo = raw.min()
    if hi <= 0.0:
        return np.zeros_like(raw)
    if hi == lo:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def upsample_bilinear(values, out_shape):
    """Bilinearly resize a 2-D float map to ``out_shape`` (H, W)."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DimensionError(f"expected 2-D map, got shape {values.shape}")
    if tuple(values.shape) == tuple(out_shape):
        return values.copy()
    t = torch.from_numpy(values)[None, None]
    up = F.interpolate(t, size=tuple(out_shape), mode="bilinear", align_corners=False)
    return up[0, 0].numpy()


def compute_cam(model, img, class_index, mode="auto"):
    """Compute the class activation map of ``model`` for ``img``.

    Args:
        model: detector exposing ``feature_maps``, ``feature_gradients`` and
            (for classifier-weight mode) ``class_weights``.
        img: float image (H, W, 3) in [0, 1].
        class_index: class whose evidence is mapped (0 real, 1 fake).
        mode: "auto" uses classifier weights when the model has them and
            falls back to gradient weights; "cam" / "gradcam" force a mode.

    Returns:
        ActivationMap at image resolution.
    """
    img = check_image(img)
    n_classes = getattr(model, "n_classes", 2)
    if not 0 <= class_index < n_classes:
        raise ValueError(f"class_index {class_index} out of range [0, {n_classes})")
    if mode not in ("auto", "cam", "gradcam"):
        raise ValueError(f"unknown CAM mode {mode!r}")

    class_weights = getattr(model, "class_weights", None)
    if mode == "cam" and class_weights is None:
        raise ConfigurationError("model has no classifier weights; use gradcam mode")
    use_weights = class_weights is not None and mode != "gradcam"

    features = model.feature_maps(img)  # (h, w, C)
    if use_weights:
        weights = np.asarray(class_weights, dtype=np.float32)[class_index]
    else:
        grads = model.feature_gradients(img, class_index)  # (h, w, C)
        weights = grads.mean(axis=(0, 1)).astype(np.float32)

    raw = np.einsum("hwc,c->hw", features.astype(np.float32), weights)
    raw = np.maximum(raw, np.float32(0.0))
    up = upsample_bilinear(raw, img.shape[:2])
    values = normalize_minmax(up)
    return ActivationMap(
        values=values,
        class_index=int(class_index),
        source_model=getattr(model, "model_id", "model"),
    )


def _jet(values):
    """Piecewise-linear jet colormap for a [0, 1] map; returns (H, W, 3)."""
    v = np.asarray(values, dtype=np.float32)
    r = np.clip(1.5 - np.abs(4.0 * v - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * v - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * v - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def overlay_cam(img, cam, opacity=0.5):
    """Blend a jet-colored heat map onto an image.

    ``opacity`` 0 returns the image unchanged; 1 returns the pure heat map.
    """
    img = check_image(img)
    values = cam.values if isinstance(cam, ActivationMap) else np.asarray(cam)
    check_same_spatial(img, values, names=("image", "activation map"))
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    if opacity == 0.0:
        return img.copy()
    heat = _jet(values)
    out = (np.float32(1.0 - opacity)) * img + np.float32(opacity) * heat
    return np.clip(out, 0.0, 1.0).astype(np.float32)
