"""Image I/O and pixel-level primitives.

Pixels live in [0, 1] floats internally; 8-bit PNG/JPEG files are the
interchange format. Adversarial outputs must be written as PNG: lossy
formats would destroy perturbations smaller than the 8-bit quantum.
"""

import numpy as np
from PIL import Image

from .errors import DimensionError, FormatError
from .validation import check_image, check_mask, check_noise, check_same_spatial

# Round-trip quantization bound for 8-bit interchange: 1 / (2 * 255).
QUANTIZATION_BOUND = 1.0 / 510.0

_LOSSY_SUFFIXES = (".jpg", ".jpeg")


def load_image(path):
    """Load an 8- or 16-bit raster image as a float32 (H, W, 3) array in [0, 1].

    Grayscale inputs are replicated to 3 channels; channel order is RGB.

    Raises:
        FormatError: unsupported channel layout (e.g. alpha channels).
        OSError: unreadable or undecodable file.
    """
    with Image.open(path) as im:
        im.load()
        mode = im.mode
        if mode in ("RGBA", "LA", "PA"):
            raise FormatError(f"{path}: alpha channels are not supported (mode {mode})")
        if mode == "P":
            im = im.convert("RGB")
            mode = "RGB"
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            arr = arr / 65535.0
        elif mode == "L":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        elif mode == "RGB":
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            raise FormatError(f"{path}: unsupported image mode {mode}")
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    return check_image(arr.astype(np.float32), name=str(path))


def save_image(img, path):
    """Write a [0, 1] float image as an 8-bit PNG.

    Round-tripping through :func:`load_image` changes each pixel by at most
    ``QUANTIZATION_BOUND``. Lossy suffixes are rejected.
    """
    img = check_image(img)
    suffix = str(path).lower()
    if suffix.endswith(_LOSSY_SUFFIXES):
        raise FormatError(f"{path}: refusing lossy format for float image output")
    data = np.round(img * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def save_mask(mask, path):
    """Write a {0, 1} mask as an 8-bit single-channel PNG (0 / 255)."""
    mask = check_mask(mask)
    Image.fromarray(mask * np.uint8(255), mode="L").save(path, format="PNG")


def load_mask(path):
    """Load a binary mask PNG written by :func:`save_mask`."""
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(f"{path}: mask must be single-channel 8-bit, got {im.mode}")
        arr = np.asarray(im)
    if not np.isin(arr, (0, 255)).all():
        raise FormatError(f"{path}: mask pixels must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def apply_mask(noise, mask):
    """Restrict a noise field to a binary mask.

    Output equals ``noise`` wherever ``mask == 1`` and is exactly zero
    elsewhere; the mask broadcasts across channels. Idempotent.
    """
    noise = check_noise(noise)
    mask = check_mask(mask)
    check_same_spatial(noise, mask, names=("noise", "mask"))
    return np.where(mask[:, :, None] == 1, noise, np.float32(0.0))


def blend_masked(original, perturbed, mask):
    """Compose an adversarial image: perturbed pixels inside the mask,
    original pixels outside, both copied bit-exactly.

    Equivalent to ``original + apply_mask(perturbed - original, mask)`` but
    immune to floating-point round-off in the add/subtract round trip.
    """
    original = check_image(original)
    perturbed = check_image(perturbed)
    mask = check_mask(mask)
    if original.shape != perturbed.shape:
        raise DimensionError(
            f"original shape {original.shape} != perturbed shape {perturbed.shape}"
        )
    check_same_spatial(original, mask, names=("image", "mask"))
    return np.where(mask[:, :, None] == 1, perturbed, original)
