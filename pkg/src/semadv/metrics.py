"""Image quality metrics, attack success rate, and evaluation harnesses.

Quality metrics support two pixel scales because published numbers mix
conventions: "unit" treats pixels as [0, 1], "255" as [0, 255]. MSE/MAE
change by the square/linear factor; PSNR is scale-invariant.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .errors import DimensionError, EvaluationError
from .validation import check_image, check_image_batch

_SCALES = {"unit": 1.0, "255": 255.0}

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class QualityReport:
    """Per-image (or averaged) similarity between original and adversarial."""

    mse: float
    mae: float
    psnr: float
    ssim: float
    value_rate: float
    pixel_scale: str


@dataclass(frozen=True)
class TransferCell:
    """Attack success rate of one (source model, attack, target model) cell."""

    source_model: str
    target_model: str
    attack: str
    asr: float
    n: int


@dataclass(frozen=True)
class SweepRow:
    """One perturbation-sweep point: budget, success rate, mean quality."""

    epsilon: float
    asr: float
    n: int
    report: QualityReport


def _pair(a, b):
    a = check_image(a, name="first image")
    b = check_image(b, name="second image")
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def _scale_factor(scale):
    if scale not in _SCALES:
        raise ValueError(f"pixel scale must be one of {sorted(_SCALES)}, got {scale!r}")
    return _SCALES[scale]


def mse(a, b, scale="unit"):
    """Mean squared per-pixel difference in the chosen pixel scale."""
    a, b = _pair(a, b)
    f = _scale_factor(scale)
    return float(((a * f - b * f) ** 2).mean())


def mae(a, b, scale="unit"):
    """Mean absolute per-pixel difference in the chosen pixel scale."""
    a, b = _pair(a, b)
    f = _scale_factor(scale)
    return float(np.abs(a * f - b * f).mean())


def psnr(a, b, scale="unit"):
    """Peak signal-to-noise ratio in dB; identical images return the
    documented 100 dB cap instead of infinity."""
    m = mse(a, b, scale=scale)
    if m == 0.0:
        return PSNR_CAP_DB
    peak = _scale_factor(scale)
    return float(10.0 * np.log10(peak * peak / m))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(a, b):
    """Mean structural similarity with the standard Gaussian window
    (11x11, sigma 1.5, K1 0.01, K2 0.03, dynamic range 1), channels averaged.

    Windows are taken in "valid" mode, so images must be at least 11x11.
    """
    a, b = _pair(a, b)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM, "
            f"got {h}x{w}"
        )
    kernel = _gaussian_kernel()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    channel_means = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = correlate2d(x, kernel, mode="valid")
        mu_y = correlate2d(y, kernel, mode="valid")
        var_x = correlate2d(x * x, kernel, mode="valid") - mu_x * mu_x
        var_y = correlate2d(y * y, kernel, mode="valid") - mu_y * mu_y
        cov = correlate2d(x * y, kernel, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        channel_means.append((num / den).mean())
    return float(np.mean(channel_means))


def quality_report(original, adversarial, scale="unit", value_rate=1.0):
    """Bundle the four quality metrics plus a value rate into one report."""
    return QualityReport(
        mse=mse(original, adversarial, scale=scale),
        mae=mae(original, adversarial, scale=scale),
        psnr=psnr(original, adversarial, scale=scale),
        ssim=ssim(original, adversarial),
        value_rate=float(value_rate),
        pixel_scale=scale,
    )


def attack_success_rate(model, originals, adversarials, labels,
                        mode="eligible", source_model="", attack=""):
    """Fraction of adversarials the model misclassifies against true labels.

    Mode "eligible" (default) first drops originals the model already
    misclassifies, so pre-existing errors are not credited to the attack;
    mode "all" counts over every sample.
    """
    originals = check_image_batch(originals, name="originals")
    adversarials = check_image_batch(adversarials, name="adversarials")
    labels = np.asarray(labels, dtype=np.int64)
    if not (len(originals) == len(adversarials) == len(labels)):
        raise DimensionError("originals, adversarials and labels must align")
    if mode not in ("eligible", "all"):
        raise ValueError(f"unknown ASR mode {mode!r}")
    if mode == "eligible":
        keep = model.predict(originals) == labels
    else:
        keep = np.ones(len(labels), dtype=bool)
    if not keep.any():
        raise EvaluationError("no eligible samples to evaluate")
    preds = model.predict(adversarials[keep])
    flipped = int((preds != labels[keep]).sum())
    n = int(keep.sum())
    return TransferCell(
        source_model=source_model,
        target_model=getattr(model, "model_id", "model"),
        attack=attack,
        asr=flipped / n,
        n=n,
    )


def transfer_matrix(source_models, target_models, attacks, images, labels,
                    label_maps=None, mode="eligible"):
    """Cross-model transferability table.

    For every (source, attack) pair the adversarial batch is generated once
    and evaluated against every target; source == target cells measure the
    white-box rate, the rest black-box transfer.

    Args:
        source_models, target_models: fitted detectors (same input size).
        attacks: mapping of attack name to a factory ``f(detector) -> attack``.
        images, labels: clean evaluation batch with true labels.
        label_maps: per-sample semantic label maps for masked attacks.

    Returns:
        TransferCells ordered by (source, attack, target).
    """
    images = check_image_batch(images)
    sizes = {m.input_size for m in list(source_models) + list(target_models)}
    if len(sizes) != 1:
        raise DimensionError(f"models disagree on input size: {sorted(sizes)}")
    cells = []
    for source in source_models:
        for attack_name, factory in attacks.items():
            attack = factory(source)
            adv = attack.transform(images, y=labels, label_maps=label_maps)
            for target in target_models:
                cells.append(
                    attack_success_rate(
                        target, images, adv, labels, mode=mode,
                        source_model=source.model_id, attack=attack_name,
                    )
                )
    return cells


def perturbation_sweep(model, images, labels, eps_list, label_maps=None,
                       alpha=0.015, iters=20, attack_factory=None,
                       scale="unit", mode="eligible"):
    """Attack success and visual quality across perturbation budgets.

    One masked-attack run per epsilon with alpha and iterations held fixed;
    rows are emitted in (strictly ascending) epsilon order. Epsilon 0 is the
    identity attack. Quality metrics are averaged over the eligible samples.
    """
    from .attacks import SemanticMaskAttack
    from .cam import compute_cam
    from .regions import value_rate as region_value_rate

    images = check_image_batch(images)
    labels = np.asarray(labels, dtype=np.int64)
    eps_list = list(eps_list)
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly ascending")

    if attack_factory is None:
        def attack_factory(eps):
            return SemanticMaskAttack(detector=model, epsilon=eps,
                                      alpha=alpha, iters=iters)

    if mode == "eligible":
        keep = model.predict(images) == labels
    else:
        keep = np.ones(len(labels), dtype=bool)
    if not keep.any():
        raise EvaluationError("no eligible samples to sweep")
    idx = np.flatnonzero(keep)

    rows = []
    for eps in eps_list:
        per_image = {"mse": [], "mae": [], "psnr": [], "ssim": [], "vr": []}
        flipped = 0
        for i in idx:
            lm = None if label_maps is None else label_maps[i]
            if eps == 0.0:
                adv_img, mask = images[i].copy(), None
                is_flipped = int(model.predict_one(adv_img).argmax()) != labels[i]
            else:
                result = attack_factory(eps).run(images[i], y=labels[i], label_map=lm)
                adv_img, mask = result.adversarial, result.mask
                is_flipped = result.flipped
            flipped += int(is_flipped)
            per_image["mse"].append(mse(images[i], adv_img, scale=scale))
            per_image["mae"].append(mae(images[i], adv_img, scale=scale))
            per_image["psnr"].append(psnr(images[i], adv_img, scale=scale))
            per_image["ssim"].append(ssim(images[i], adv_img))
            if mask is None:
                per_image["vr"].append(1.0)
            else:
                cam = compute_cam(model, images[i], int(labels[i]))
                per_image["vr"].append(region_value_rate(cam, mask))
        report = QualityReport(
            mse=float(np.mean(per_image["mse"])),
            mae=float(np.mean(per_image["mae"])),
            psnr=float(np.mean(per_image["psnr"])),
            ssim=float(np.mean(per_image["ssim"])),
            value_rate=float(np.mean(per_image["vr"])),
            pixel_scale=scale,
        )
        rows.append(SweepRow(epsilon=float(eps), asr=flipped / len(idx),
                             n=len(idx), report=report))
    return rows


# ---------------------------------------------------------------------------
# Report serialization: fixed-header CSVs and paper-layout text tables.
# ---------------------------------------------------------------------------

TRANSFER_CSV_HEADER = ["source_model", "attack", "target_model", "asr", "n"]
SWEEP_CSV_HEADER = ["epsilon", "asr", "n", "mse", "mae", "psnr", "ssim",
                    "value_rate", "pixel_scale"]


def write_transfer_csv(cells, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRANSFER_CSV_HEADER)
        for c in cells:
            writer.writerow([c.source_model, c.attack, c.target_model,
                             repr(c.asr), c.n])


def write_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_CSV_HEADER)
        for r in rows:
            writer.writerow([repr(r.epsilon), repr(r.asr), r.n,
                             repr(r.report.mse), repr(r.report.mae),
                             repr(r.report.psnr), repr(r.report.ssim),
                             repr(r.report.value_rate), r.report.pixel_scale])


def format_transfer_table(cells):
    """Render transfer cells as a text table: one row per (source, attack),
    one ASR(%) column per target."""
    targets = list(dict.fromkeys(c.target_model for c in cells))
    rows = {}
    for c in cells:
        rows.setdefault((c.source_model, c.attack), {})[c.target_model] = c
    name_w = max([len("source")] + [len(s) for s, _ in rows]) + 2
    attack_w = max([len("attack")] + [len(a) for _, a in rows]) + 2
    col_w = max([12] + [len(t) + 2 for t in targets])
    header = ("source".ljust(name_w) + "attack".ljust(attack_w)
              + "".join(t.rjust(col_w) for t in targets))
    lines = [header, "-" * len(header)]
    for (source, attack), by_target in rows.items():
        line = source.ljust(name_w) + attack.ljust(attack_w)
        for t in targets:
            cell = by_target.get(t)
            line += (f"{cell.asr * 100:.2f}" if cell else "-").rjust(col_w)
        lines.append(line)
    return "\n".join(lines) + "\n"


def format_sweep_table(rows):
    header = (f"{'epsilon':>8}{'ASR(%)':>9}{'n':>6}{'MSE':>12}{'MAE':>12}"
              f"{'PSNR':>10}{'SSIM':>9}{'ValueRate':>11}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.epsilon:>8.3f}{r.asr * 100:>9.2f}{r.n:>6d}"
            f"{r.report.mse:>12.6f}{r.report.mae:>12.6f}"
            f"{r.report.psnr:>10.4f}{r.report.ssim:>9.4f}"
            f"{r.report.value_rate:>11.4f}"
        )
    return "\n".join(lines) + "\n"
