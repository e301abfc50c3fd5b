"""Facial semantic label maps and adaptive region selection.

A label map assigns each pixel one of eleven facial categories. Regions are
ranked by their mean activation ("forgery correlation score") and selected
by policy; the union of selected regions, optionally dilated, becomes the
binary attack mask.
"""

from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    DimensionError,
    FormatError,
    SelectionError,
    UndefinedRateError,
)
from .validation import NUM_LABELS, check_label_map, check_mask, check_same_spatial

LABEL_NAMES = {
    0: "background",
    1: "skin",
    2: "left_brow",
    3: "right_brow",
    4: "left_eye",
    5: "right_eye",
    6: "nose",
    7: "upper_lip",
    8: "mouth_interior",
    9: "lower_lip",
    10: "hair",
}
LABEL_IDS = {name: label for label, name in LABEL_NAMES.items()}

# Eyes, brows and nose: the default joint attack region.
DEFAULT_ATTACK_REGIONS = frozenset({2, 3, 4, 5, 6})
# Large or peripheral regions excluded from adaptive ranking by default:
# perturbing them costs too much visual quality per unit of attack effect.
DEFAULT_EXCLUDED_REGIONS = frozenset({0, 1, 10})


@dataclass(frozen=True)
class RegionScore:
    """Mean activation and area share for one semantic label."""

    label: int
    score: float
    area_fraction: float


@dataclass(frozen=True)
class SelectionPolicy:
    """How to turn ranked region scores into a selected label set.

    kind "fixed" uses ``regions`` verbatim; "top_k" takes the ``k``
    best-scoring labels outside ``exclude``; "threshold" takes every
    non-excluded label scoring at least ``tau``.
    """

    kind: str
    regions: frozenset = frozenset()
    k: int = 5
    tau: float = 0.0
    exclude: frozenset = DEFAULT_EXCLUDED_REGIONS

    def __post_init__(self):
        if self.kind not in ("fixed", "top_k", "threshold"):
            raise ValueError(f"unknown selection policy kind {self.kind!r}")


def fixed_policy(regions=DEFAULT_ATTACK_REGIONS):
    return SelectionPolicy(kind="fixed", regions=frozenset(regions))


def top_k_policy(k=5, exclude=DEFAULT_EXCLUDED_REGIONS):
    return SelectionPolicy(kind="top_k", k=k, exclude=frozenset(exclude))


def threshold_policy(tau, exclude=DEFAULT_EXCLUDED_REGIONS):
    return SelectionPolicy(kind="threshold", tau=tau, exclude=frozenset(exclude))


def load_label_map(path, image_dims=None):
    """Load an 8-bit single-channel label-map PNG.

    Values outside [0, 10] are rejected; ``image_dims`` (H, W), when given,
    must match the map's dimensions.
    """
    with Image.open(path) as im:
        if im.mode != "L":
            raise FormatError(
                f"{path}: label map must be 8-bit single-channel, got mode {im.mode}"
            )
        arr = np.asarray(im)
    try:
        labels = check_label_map(arr, spatial_shape=image_dims, name=str(path))
    except DimensionError:
        raise
    except FormatError:
        raise FormatError(
            f"{path}: label values must lie in [0, {NUM_LABELS - 1}]"
        ) from None
    return labels


def save_label_map(labels, path):
    """Write a label map as an 8-bit single-channel PNG."""
    labels = check_label_map(labels)
    Image.fromarray(labels, mode="L").save(path, format="PNG")


def _cam_values(cam):
    values = getattr(cam, "values", cam)
    return np.asarray(values)


def score_regions(cam, labels):
    """Score every semantic label by its mean activation.

    Labels absent from the map score 0 with zero area. The result covers all
    eleven labels, sorted by score descending with ties broken by ascending
    label id.
    """
    values = _cam_values(cam)
    labels = check_label_map(labels)
    check_same_spatial(values, labels, names=("activation map", "label map"))
    total = labels.size
    flat_values = values.reshape(-1).astype(np.float64)
    flat_labels = labels.reshape(-1)
    counts = np.bincount(flat_labels, minlength=NUM_LABELS).astype(np.float64)
    sums = np.bincount(flat_labels, weights=flat_values, minlength=NUM_LABELS)
    scores = []
    for label in range(NUM_LABELS):
        count = counts[label]
        score = float(sums[label] / count) if count else 0.0
        scores.append(
            RegionScore(label=label, score=score, area_fraction=float(count / total))
        )
    scores.sort(key=lambda s: (-s.score, s.label))
    return scores


def select_regions(scores, policy):
    """Apply a selection policy to ranked region scores; returns label ids."""
    if policy.kind == "fixed":
        if not policy.regions:
            raise SelectionError("fixed policy has an empty region set")
        bad = [r for r in policy.regions if not 0 <= r < NUM_LABELS]
        if bad:
            raise ValueError(f"invalid label ids in fixed region set: {sorted(bad)}")
        return set(policy.regions)

    eligible = [s for s in scores if s.label not in policy.exclude]
    if not eligible:
        raise SelectionError("no eligible regions after exclusions")
    if policy.kind == "top_k":
        if policy.k <= 0:
            raise ValueError(f"top_k requires k > 0, got {policy.k}")
        return {s.label for s in eligible[: policy.k]}
    # threshold
    chosen = {s.label for s in eligible if s.score >= policy.tau}
    if not chosen:
        raise SelectionError(f"no region scored at least {policy.tau}")
    return chosen


def build_mask(labels, selected, dilation_px=0):
    """Union the selected labels' pixels into a binary mask, then dilate.

    Dilation uses the 4-connected structuring element, one pixel per
    iteration; ``dilation_px`` 0 (the default) leaves region boundaries
    exactly as parsed.
    """
    labels = check_label_map(labels)
    if not selected:
        raise SelectionError("cannot build a mask from an empty selection")
    selected = sorted(set(int(s) for s in selected))
    bad = [s for s in selected if not 0 <= s < NUM_LABELS]
    if bad:
        raise ValueError(f"invalid label ids in selection: {bad}")
    if dilation_px < 0:
        raise ValueError(f"dilation_px must be >= 0, got {dilation_px}")
    mask = np.isin(labels, selected)
    if dilation_px > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, iterations=dilation_px)
    return mask.astype(np.uint8)


def value_rate(cam, mask, mode="mass"):
    """Fraction of the activation map claimed by a mask.

    Mode "mass" (default) is the activation-mass fraction
    sum(cam[mask]) / sum(cam); mode "area" is the plain pixel-count
    fraction |mask| / (H*W).
    """
    values = _cam_values(cam).astype(np.float64)
    mask = check_mask(mask)
    check_same_spatial(values, mask, names=("activation map", "mask"))
    if mode == "area":
        return float(mask.sum() / mask.size)
    if mode != "mass":
        raise ValueError(f"unknown value-rate mode {mode!r}")
    total = values.sum()
    if total == 0.0:
        raise UndefinedRateError("activation map is all-zero; mass fraction undefined")
    return float(values[mask == 1].sum() / total)
