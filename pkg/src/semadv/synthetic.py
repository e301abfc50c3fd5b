"""Procedural face-like images for desk-scale detector training.

Faces are drawn as parameterized primitives (skin ellipse, hair, eyes,
brows, nose, lips) on an RGB canvas and, with identical geometry, on a
label canvas, so every sample ships with an exact ground-truth semantic
label map. Fake samples receive a localized high-contrast stripe tamper
inside a facial region, recorded as a ground-truth binary mask.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from .errors import FormatError
from .imaging import load_image, load_mask, save_image, save_mask
from .regions import load_label_map, save_label_map

REAL, FAKE = "real", "fake"

# Tamper support is one facial-feature region, dilated until its area
# fraction reaches this floor (ceiling asserted by generator calibration).
_TAMPER_MIN_FRAC = 0.018
_TAMPER_MAX_DILATION = 10
# Stripe periods must outlive two rounds of 2x average pooling.
_TAMPER_PERIOD = (4.0, 8.0)
_TAMPER_ALPHA = (0.55, 0.80)

# Candidate tamper supports: forgeries tamper the facial features.
_TAMPER_REGIONS = (
    (2,),        # left brow
    (3,),        # right brow
    (4,),        # left eye
    (5,),        # right eye
    (6,),        # nose
    (7, 8, 9),   # mouth
)

# Benign stripe patches appear on these labels in both classes (clothing,
# wallpaper, hair sheen), so texture alone never certifies a forgery: the
# detector must localize evidence to the facial features.
_DISTRACTOR_LABELS = (0, 1, 10)
_DISTRACTOR_PROB = 0.5
_DISTRACTOR_RADIUS_FRAC = (0.10, 0.18)


@dataclass(frozen=True)
class SyntheticSample:
    """One generated face with its ground truth.

    tamper_region is None for real samples and a non-empty {0,1} mask for
    fake ones; label_map carries the 11-category facial parse.
    """

    image: np.ndarray
    label: str
    tamper_region: np.ndarray | None
    label_map: np.ndarray


def _ellipse_box(cx, cy, rx, ry):
    return [cx - rx, cy - ry, cx + rx, cy + ry]


def _face_params(rng, size):
    """Sample one face's geometry and palette; a tight aligned-style crop."""
    s = float(size)
    cx = s * (0.50 + rng.uniform(-0.02, 0.02))
    cy = s * (0.54 + rng.uniform(-0.02, 0.02))
    rx = s * rng.uniform(0.36, 0.42)
    ry = s * rng.uniform(0.42, 0.48)
    skin = np.array([200, 160, 130]) + rng.integers(-25, 26, 3)
    hair = rng.integers(20, 90, 3)
    iris = rng.integers(30, 120, 3)
    lip = np.array([170, 70, 80]) + rng.integers(-30, 31, 3)
    background = rng.integers(40, 210, 3)
    return {
        "cx": cx, "cy": cy, "rx": rx, "ry": ry,
        "eye_dx": rx * rng.uniform(0.42, 0.50),
        "eye_y": cy - ry * rng.uniform(0.14, 0.20),
        "eye_rx": rx * rng.uniform(0.22, 0.28),
        "eye_ry": ry * rng.uniform(0.11, 0.15),
        "brow_dy": ry * rng.uniform(0.24, 0.30),
        "brow_rx": rx * rng.uniform(0.26, 0.32),
        "brow_ry": ry * rng.uniform(0.055, 0.075),
        "nose_w": rx * rng.uniform(0.18, 0.24),
        "nose_top": cy - ry * rng.uniform(0.00, 0.06),
        "nose_bot": cy + ry * rng.uniform(0.24, 0.32),
        "mouth_y": cy + ry * rng.uniform(0.52, 0.60),
        "mouth_rx": rx * rng.uniform(0.32, 0.42),
        "lip_ry": ry * rng.uniform(0.055, 0.075),
        "mouth_open": bool(rng.random() < 0.5),
        "skin": tuple(int(v) for v in np.clip(skin, 0, 255)),
        "hair": tuple(int(v) for v in hair),
        "iris": tuple(int(v) for v in iris),
        "lip": tuple(int(v) for v in np.clip(lip, 0, 255)),
        "background": tuple(int(v) for v in background),
    }


def _draw_face(size, p):
    """Render the RGB canvas and the matching label canvas for one face."""
    rgb = Image.new("RGB", (size, size), color=p["background"])
    lab = Image.new("L", (size, size), color=0)
    rd, ld = ImageDraw.Draw(rgb), ImageDraw.Draw(lab)

    cx, cy, rx, ry = p["cx"], p["cy"], p["rx"], p["ry"]

    hair_box = _ellipse_box(cx, cy - 0.42 * ry, 1.12 * rx, 0.75 * ry)
    rd.ellipse(hair_box, fill=p["hair"])
    ld.ellipse(hair_box, fill=10)

    face_box = _ellipse_box(cx, cy, rx, ry)
    rd.ellipse(face_box, fill=p["skin"])
    ld.ellipse(face_box, fill=1)

    darker = tuple(max(0, int(v * 0.75)) for v in p["skin"])
    for side, label_brow, label_eye in ((-1, 2, 4), (+1, 3, 5)):
        ex = cx + side * p["eye_dx"]
        brow_box = _ellipse_box(ex, p["eye_y"] - p["brow_dy"], p["brow_rx"], p["brow_ry"])
        rd.ellipse(brow_box, fill=p["hair"])
        ld.ellipse(brow_box, fill=label_brow)

        eye_box = _ellipse_box(ex, p["eye_y"], p["eye_rx"], p["eye_ry"])
        rd.ellipse(eye_box, fill=(245, 245, 245))
        ld.ellipse(eye_box, fill=label_eye)
        iris_r = 0.9 * p["eye_ry"]
        rd.ellipse(_ellipse_box(ex, p["eye_y"], iris_r, iris_r), fill=p["iris"])

    nose_poly = [
        (cx, p["nose_top"]),
        (cx - p["nose_w"], p["nose_bot"]),
        (cx + p["nose_w"], p["nose_bot"]),
    ]
    rd.polygon(nose_poly, fill=darker)
    ld.polygon(nose_poly, fill=6)

    lip_ry = p["lip_ry"]
    upper_box = _ellipse_box(cx, p["mouth_y"] - lip_ry, p["mouth_rx"], lip_ry)
    lower_box = _ellipse_box(cx, p["mouth_y"] + lip_ry, p["mouth_rx"], lip_ry)
    rd.ellipse(upper_box, fill=p["lip"])
    ld.ellipse(upper_box, fill=7)
    rd.ellipse(lower_box, fill=p["lip"])
    ld.ellipse(lower_box, fill=9)
    if p["mouth_open"]:
        gap_box = _ellipse_box(cx, p["mouth_y"], 0.8 * p["mouth_rx"], 0.55 * lip_ry)
        rd.ellipse(gap_box, fill=(40, 15, 15))
        ld.ellipse(gap_box, fill=8)

    image = np.asarray(rgb, dtype=np.float32) / 255.0
    labels = np.asarray(lab, dtype=np.uint8)
    return image, labels


def _grain(rng, image):
    """Mild smooth grain shared by both classes, so texture alone is benign."""
    from scipy import ndimage

    noise = rng.normal(0.0, 0.035, size=image.shape)
    smooth = ndimage.gaussian_filter(noise, sigma=(1.2, 1.2, 0))
    out = image + smooth.astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _blend_stripes(rng, image, support):
    """Blend a random high-contrast stripe pattern over a boolean support."""
    size = image.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0.0, np.pi)
    period = rng.uniform(*_TAMPER_PERIOD)
    phase = rng.uniform(0.0, period)
    coord = xx * np.cos(theta) + yy * np.sin(theta) + phase
    stripe = (coord % period) < (period / 2.0)

    color_a = rng.uniform(0.65, 0.95, size=3)
    color_b = rng.uniform(0.05, 0.35, size=3)
    pattern = np.where(stripe[:, :, None], color_a, color_b).astype(np.float32)
    alpha = np.float32(rng.uniform(*_TAMPER_ALPHA))

    out = image.copy()
    sel = support[:, :, None] & np.ones(3, dtype=bool)
    blended = (1.0 - alpha) * image + alpha * pattern
    out[sel] = blended[sel]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _apply_tamper(rng, image, labels):
    """Stripe-tamper one facial-feature region.

    The support is the chosen region's exact pixels, dilated a little when
    the region is tiny so the tampered fraction stays learnable.
    """
    from scipy import ndimage

    choice = _TAMPER_REGIONS[int(rng.integers(0, len(_TAMPER_REGIONS)))]
    region = np.isin(labels, choice)
    min_pixels = _TAMPER_MIN_FRAC * labels.size
    for _ in range(_TAMPER_MAX_DILATION):
        if region.sum() >= min_pixels:
            break
        region = ndimage.binary_dilation(region)
    return _blend_stripes(rng, image, region), region.astype(np.uint8)


def _apply_distractors(rng, image, labels, p):
    """Maybe add benign stripe patches outside the facial features."""
    if rng.random() >= _DISTRACTOR_PROB:
        return image
    size = image.shape[0]
    sites = [
        (p["cx"], p["cy"] - 0.60 * p["ry"]),                  # forehead
        (p["cx"] - 0.62 * p["rx"], p["cy"] + 0.28 * p["ry"]),  # left cheek
        (p["cx"] + 0.62 * p["rx"], p["cy"] + 0.28 * p["ry"]),  # right cheek
        (size * 0.12, size * rng.uniform(0.2, 0.8)),           # left margin
        (size * 0.88, size * rng.uniform(0.2, 0.8)),           # right margin
    ]
    benign = np.isin(labels, _DISTRACTOR_LABELS)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_patches = int(rng.integers(1, 3))
    order = rng.permutation(len(sites))[:n_patches]
    for site_idx in order:
        cx, cy = sites[site_idx]
        lo, hi = _DISTRACTOR_RADIUS_FRAC
        rx = size * rng.uniform(lo, hi)
        ry = size * rng.uniform(lo, hi)
        ellipse = (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2) <= 1.0
        support = ellipse & benign
        if support.any():
            image = _blend_stripes(rng, image, support)
    return image


def _one_sample(rng, size, fake):
    p = _face_params(rng, size)
    image, labels = _draw_face(size, p)
    image = _grain(rng, image)
    image = _apply_distractors(rng, image, labels, p)
    if fake:
        image, tamper = _apply_tamper(rng, image, labels)
        return SyntheticSample(image, FAKE, tamper, labels)
    return SyntheticSample(image, REAL, None, labels)


def generate_synthetic_dataset(n_real, n_fake, seed, size=64):
    """Generate ``n_real`` real and ``n_fake`` tampered faces, deterministically.

    The same seed always reproduces the identical dataset, element-wise.
    Real samples come first, then fake ones; shuffling is the trainer's job.
    """
    if n_real < 0 or n_fake < 0:
        raise ValueError("sample counts must be non-negative")
    rng = np.random.default_rng(seed)
    samples = [_one_sample(rng, size, fake=False) for _ in range(n_real)]
    samples += [_one_sample(rng, size, fake=True) for _ in range(n_fake)]
    return samples


def samples_to_arrays(samples):
    """Stack samples into (X, y) arrays; y is 0 for real, 1 for fake."""
    X = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.array([1 if s.label == FAKE else 0 for s in samples], dtype=np.int64)
    return X, y


def write_dataset(samples, out_dir, seed=None, size=None):
    """Persist a dataset as PNGs plus a JSON manifest.

    Layout: images/NNNN.png, labels/NNNN.png, tampers/NNNN.png (fakes only),
    manifest.json listing relative paths and labels.
    """
    os.makedirs(out_dir, exist_ok=True)
    for sub in ("images", "labels", "tampers"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        image_rel = f"images/{sid}.png"
        labels_rel = f"labels/{sid}.png"
        save_image(s.image, os.path.join(out_dir, image_rel))
        save_label_map(s.label_map, os.path.join(out_dir, labels_rel))
        tamper_rel = None
        if s.tamper_region is not None:
            tamper_rel = f"tampers/{sid}.png"
            save_mask(s.tamper_region, os.path.join(out_dir, tamper_rel))
        records.append(
            {"id": sid, "image": image_rel, "label": s.label,
             "label_map": labels_rel, "tamper_mask": tamper_rel}
        )
    manifest = {
        "kind": "semadv-dataset",
        "n_real": sum(1 for s in samples if s.label == REAL),
        "n_fake": sum(1 for s in samples if s.label == FAKE),
        "seed": seed,
        "size": size if size is not None else (samples[0].image.shape[0] if samples else None),
        "samples": records,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_dataset(path, limit=None):
    """Load a dataset written by :func:`write_dataset`; returns samples in order."""
    manifest_path = os.path.join(path, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("kind") != "semadv-dataset":
        raise FormatError(f"{manifest_path}: not a dataset manifest")
    samples = []
    records = manifest["samples"][:limit] if limit else manifest["samples"]
    for rec in records:
        image = load_image(os.path.join(path, rec["image"]))
        label_map = load_label_map(os.path.join(path, rec["label_map"]), image.shape[:2])
        tamper = None
        if rec.get("tamper_mask"):
            tamper = load_mask(os.path.join(path, rec["tamper_mask"]))
        samples.append(SyntheticSample(image, rec["label"], tamper, label_map))
    return samples
