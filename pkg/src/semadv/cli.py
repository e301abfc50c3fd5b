"""Command-line entry point for reproducible attack/evaluation runs.

Configuration comes from an optional JSON file plus flag overrides (flags
win). Every run writes a ``run.json`` manifest echoing the fully resolved
configuration, seed included, so the output directory alone suffices to
re-run the identical experiment. Exit codes: 0 success, 1 partial failure,
2 configuration error.
"""

import inspect
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import click
import numpy as np
from scipy import ndimage

from . import metrics as M
from .attacks import ATTACKS, make_attack
from .cam import compute_cam, overlay_cam
from .detector import ForgeryDetector, train_reference_detector
from .errors import ConfigurationError, EvaluationError, FormatError
from .imaging import load_image, load_mask, save_image, save_mask
from .regions import LABEL_IDS, value_rate
from .synthetic import generate_synthetic_dataset, read_dataset, samples_to_arrays, write_dataset

_POLICY_ALIASES = {"fixed": "fixed", "topk": "top_k", "threshold": "threshold",
                   "none": "none"}

_DEFAULTS = {
    "seed": 0,
    "epsilon": 0.15,
    "alpha": 0.015,
    "iters": 20,
    "attack": "semantic",
    "attacks": "fgsm,bim,pgd,semantic",
    "policy": "fixed",
    "regions": "left_brow,right_brow,left_eye,right_eye,nose",
    "k": 5,
    "tau": 0.5,
    "dilation": 0,
    "distance": "l2",
    "jitter": 1e-3,
    "metric_scale": "unit",
    "workers": 1,
    "limit": None,
    "size": 64,
    "width": 16,
    "epochs": 30,
    "lr": 0.001,
    "n_real": 50,
    "n_fake": 50,
    "n_train": 2000,
    "n_val": 500,
    "eps_list": "0.1,0.15,0.2,0.25",
    "mode": "transfer",
    "opacity": 0.5,
    "amplify": 4.0,
    "random_start": None,
}


def _resolve(config_path, flags):
    """Merge defaults, config-file values and explicit flags (flags win)."""
    resolved = dict(_DEFAULTS)
    if config_path:
        try:
            with open(config_path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {config_path}: {e}")
        if not isinstance(cfg, dict):
            raise ConfigurationError(f"config {config_path} must hold a JSON object")
        resolved.update(cfg)
    resolved.update({k: v for k, v in flags.items() if v is not None})
    return resolved


def _require(resolved, *keys):
    for key in keys:
        if resolved.get(key) in (None, ""):
            raise ConfigurationError(f"missing required setting {key!r}")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_run_manifest(out_dir, command, resolved, extra=None):
    manifest = {"command": command, "config": resolved}
    if extra:
        manifest.update(extra)
    _write_json(os.path.join(out_dir, "run.json"), manifest)


def _parse_regions(spec):
    regions = []
    for token in str(spec).split(","):
        token = token.strip()
        if not token:
            continue
        if token.isdigit():
            regions.append(int(token))
        elif token in LABEL_IDS:
            regions.append(LABEL_IDS[token])
        else:
            raise ConfigurationError(
                f"unknown region {token!r}; use label names {sorted(LABEL_IDS)} or ids"
            )
    if not regions:
        raise ConfigurationError("empty region list")
    return tuple(sorted(set(regions)))


def _parse_floats(spec):
    try:
        return [float(tok) for tok in str(spec).split(",") if tok.strip()]
    except ValueError as e:
        raise ConfigurationError(f"bad float list {spec!r}: {e}")


def _attack_params(name, resolved):
    """Project the resolved config onto the attack's constructor signature."""
    if name not in ATTACKS:
        raise ConfigurationError(
            f"unknown attack {name!r}; choose from {sorted(ATTACKS)}"
        )
    policy = resolved["policy"]
    if policy not in _POLICY_ALIASES:
        raise ConfigurationError(
            f"unknown policy {policy!r}; choose from {sorted(_POLICY_ALIASES)}"
        )
    candidates = {
        "epsilon": float(resolved["epsilon"]),
        "alpha": float(resolved["alpha"]),
        "iters": int(resolved["iters"]),
        "distance": resolved["distance"],
        "mask_policy": _POLICY_ALIASES[policy],
        "regions": _parse_regions(resolved["regions"]),
        "k": int(resolved["k"]),
        "tau": float(resolved["tau"]),
        "dilation": int(resolved["dilation"]),
        "jitter": float(resolved["jitter"]),
        "seed": int(resolved["seed"]),
        "random_start": resolved["random_start"],
    }
    accepted = inspect.signature(ATTACKS[name].__init__).parameters
    return {k: v for k, v in candidates.items() if k in accepted}


def _child_seeds(seed, n):
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [int(c.generate_state(1)[0]) for c in children]


def _load_detector(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"model file not found: {path}")
    return ForgeryDetector.load(path)


def _exit(code):
    sys.exit(code)


def _config_guard(fn):
    """Run a command body, mapping configuration problems to exit code 2."""
    try:
        code = fn()
    except (ConfigurationError, FormatError, FileNotFoundError) as e:
        click.echo(f"config error: {e}", err=True)
        _exit(2)
    except EvaluationError as e:
        click.echo(f"evaluation failed: {e}", err=True)
        _exit(1)
    _exit(code or 0)


def _common_options(fn):
    for opt in reversed([
        click.option("--config", "config_path", type=click.Path(), default=None,
                     help="JSON config file; flags override its values."),
        click.option("--seed", type=int, default=None),
        click.option("--out", type=click.Path(), default=None),
    ]):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Semantically masked adversarial attacks on face-forgery detectors."""


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

@main.command("gen-data")
@_common_options
@click.option("--n-real", type=int, default=None)
@click.option("--n-fake", type=int, default=None)
@click.option("--image-size", "size", type=int, default=None)
def cmd_gen_data(config_path, **flags):
    """Generate a synthetic face dataset with label maps and tamper masks."""
    def body():
        resolved = _resolve(config_path, flags)
        _require(resolved, "out")
        out = resolved["out"]
        os.makedirs(out, exist_ok=True)
        samples = generate_synthetic_dataset(
            int(resolved["n_real"]), int(resolved["n_fake"]),
            seed=int(resolved["seed"]), size=int(resolved["size"]),
        )
        write_dataset(samples, out, seed=int(resolved["seed"]),
                      size=int(resolved["size"]))
        _write_run_manifest(out, "gen-data", resolved,
                            extra={"n_samples": len(samples)})
        click.echo(f"wrote {len(samples)} samples to {out}")
        return 0
    _config_guard(body)


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

@main.command("train-toy")
@_common_options
@click.option("--data", "data_dir", type=click.Path(), default=None,
              help="Dataset directory to train on; omitted = generate one.")
@click.option("--val-data", "val_dir", type=click.Path(), default=None)
@click.option("--n-train", type=int, default=None)
@click.option("--n-val", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--image-size", "size", type=int, default=None)
@click.option("--width", type=int, default=None)
@click.option("--lr", type=float, default=None)
def cmd_train_toy(config_path, data_dir, val_dir, **flags):
    """Train and persist the reference detector with its accuracy report."""
    def body():
        resolved = _resolve(config_path, dict(flags, data=data_dir, val_data=val_dir))
        _require(resolved, "out")
        out = resolved["out"]
        os.makedirs(out, exist_ok=True)
        seed = int(resolved["seed"])
        if resolved.get("data"):
            train = read_dataset(resolved["data"])
            val = read_dataset(resolved["val_data"]) if resolved.get("val_data") else None
        else:
            data_seed, val_seed = _child_seeds(seed, 2)
            n_train, n_val = int(resolved["n_train"]), int(resolved["n_val"])
            size = int(resolved["size"])
            train = generate_synthetic_dataset(n_train // 2, n_train - n_train // 2,
                                               seed=data_seed, size=size)
            val = generate_synthetic_dataset(n_val // 2, n_val - n_val // 2,
                                             seed=val_seed, size=size)
        det = train_reference_detector(
            train, epochs=int(resolved["epochs"]), seed=seed, val_dataset=val,
            width=int(resolved["width"]), lr=float(resolved["lr"]),
        )
        model_path = os.path.join(out, "detector.ffd")
        det.save(model_path)
        report = {"model": "detector.ffd", "model_id": det.model_id,
                  "history": det.history_, "n_train": len(train),
                  "n_val": len(val) if val is not None else 0}
        _write_json(os.path.join(out, "report.json"), report)
        _write_run_manifest(out, "train-toy", resolved, extra={"report": report})
        acc = det.history_.get("val_accuracy", det.history_["final_train_accuracy"])
        click.echo(f"saved {model_path} (accuracy {acc})")
        return 0
    _config_guard(body)


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def _attack_one(det, attack_name, params, sample, true_label, scale):
    attack = make_attack(attack_name, det, **params)
    result = attack.run(sample.image, y=true_label, label_map=sample.label_map)
    anchor = int(np.argmax(det.predict_one(sample.image)))
    cam = compute_cam(det, sample.image, anchor)
    try:
        vr = value_rate(cam, result.mask)
    except Exception:
        vr = float(result.mask.mean())
    report = M.quality_report(sample.image, result.adversarial, scale=scale,
                              value_rate=vr)
    return result, report


@main.command("attack")
@_common_options
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--attack", "attack_name", type=str, default=None)
@click.option("--epsilon", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--policy", type=str, default=None)
@click.option("--regions", type=str, default=None)
@click.option("--metric-scale", "metric_scale", type=click.Choice(["unit", "255"]),
              default=None)
@click.option("--workers", type=int, default=None)
@click.option("--limit", type=int, default=None)
def cmd_attack(config_path, model_path, data_dir, attack_name, **flags):
    """Generate adversarial examples for every image in a dataset."""
    def body():
        resolved = _resolve(config_path, dict(flags, model=model_path,
                                              data=data_dir, attack=attack_name))
        _require(resolved, "out", "model", "data")
        out = resolved["out"]
        det = _load_detector(resolved["model"])
        samples = read_dataset(resolved["data"], limit=resolved.get("limit"))
        name = resolved["attack"]
        base_params = _attack_params(name, resolved)
        scale = resolved["metric_scale"]
        seeds = _child_seeds(int(resolved["seed"]), max(len(samples), 1))

        os.makedirs(out, exist_ok=True)
        for sub in ("adv", "noise", "mask", "meta"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)

        def work(i):
            sample = samples[i]
            true_label = 1 if sample.label == "fake" else 0
            params = dict(base_params)
            if "seed" in params:
                params["seed"] = seeds[i]
            return _attack_one(det, name, params, sample, true_label, scale)

        workers = int(resolved["workers"])
        indices = range(len(samples))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(lambda i: _guarded(work, i), indices))
        else:
            outcomes = [_guarded(work, i) for i in indices]

        records, n_failed, n_flipped = [], 0, 0
        eps = float(resolved["epsilon"])
        for i, outcome in enumerate(outcomes):
            sid = f"{i:04d}"
            if isinstance(outcome, Exception):
                n_failed += 1
                click.echo(f"image {sid} failed: {outcome}", err=True)
                records.append({"id": sid, "error": str(outcome)})
                continue
            result, report = outcome
            rel = {"adversarial": f"adv/{sid}.png", "noise": f"noise/{sid}.png",
                   "mask": f"mask/{sid}.png", "sidecar": f"meta/{sid}.json"}
            save_image(result.adversarial, os.path.join(out, rel["adversarial"]))
            remapped = np.clip(0.5 + result.global_noise / (2.0 * eps), 0.0, 1.0)
            save_image(remapped.astype(np.float32), os.path.join(out, rel["noise"]))
            save_mask(result.mask, os.path.join(out, rel["mask"]))
            sidecar = {
                "id": sid,
                "config": {**resolved, "image_seed": seeds[i]},
                "trace": list(result.feature_distance_trace),
                "flipped": bool(result.flipped),
                "iterations_run": result.iterations_run,
                "metrics": {
                    "mse": report.mse, "mae": report.mae, "psnr": report.psnr,
                    "ssim": report.ssim, "value_rate": report.value_rate,
                    "pixel_scale": report.pixel_scale,
                },
            }
            _write_json(os.path.join(out, rel["sidecar"]), sidecar)
            n_flipped += int(result.flipped)
            records.append({"id": sid, "error": None, "flipped": bool(result.flipped),
                            **rel})
        _write_run_manifest(out, "attack", resolved, extra={
            "results": records,
            "summary": {"n": len(samples), "n_failed": n_failed,
                        "n_flipped": n_flipped},
        })
        click.echo(f"attacked {len(samples)} images, {n_flipped} flipped, "
                   f"{n_failed} failed")
        return 1 if n_failed else 0
    _config_guard(body)


def _guarded(fn, i):
    try:
        return fn(i)
    except Exception as e:  # per-image failures are logged, not fatal
        return e


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@main.command("evaluate")
@_common_options
@click.option("--mode", type=click.Choice(["transfer", "sweep"]), default=None)
@click.option("--model", "model_paths", type=click.Path(), multiple=True,
              help="Model file; repeat for several (transfer mode).")
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--attacks", "attack_names", type=str, default=None,
              help="Comma-separated attack names (transfer mode).")
@click.option("--eps-list", "eps_list", type=str, default=None,
              help="Comma-separated ascending epsilons (sweep mode).")
@click.option("--epsilon", type=float, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--policy", type=str, default=None)
@click.option("--regions", type=str, default=None)
@click.option("--metric-scale", "metric_scale", type=click.Choice(["unit", "255"]),
              default=None)
@click.option("--limit", type=int, default=None)
def cmd_evaluate(config_path, model_paths, data_dir, attack_names, **flags):
    """Run the transferability matrix or the perturbation sweep."""
    def body():
        resolved = _resolve(config_path, dict(
            flags, data=data_dir, attacks=attack_names,
            models=list(model_paths) or None,
        ))
        _require(resolved, "out", "data")
        models = resolved.get("models") or []
        if isinstance(models, str):
            models = [m for m in models.split(",") if m]
        if not models:
            raise ConfigurationError("evaluate requires at least one --model")
        out = resolved["out"]
        os.makedirs(out, exist_ok=True)
        detectors = [_load_detector(p) for p in models]
        samples = read_dataset(resolved["data"], limit=resolved.get("limit"))
        X, y = samples_to_arrays(samples)
        label_maps = [s.label_map for s in samples]
        scale = resolved["metric_scale"]

        if resolved["mode"] == "transfer":
            names = [n.strip() for n in str(resolved["attacks"]).split(",") if n.strip()]
            factories = {}
            for n in names:
                params = _attack_params(n, resolved)
                factories[n] = (lambda det, _n=n, _p=params:
                                make_attack(_n, det, **_p))
            cells = M.transfer_matrix(detectors, detectors, factories, X, y,
                                      label_maps=label_maps)
            M.write_transfer_csv(cells, os.path.join(out, "transfer.csv"))
            table = M.format_transfer_table(cells)
            with open(os.path.join(out, "transfer.txt"), "w") as fh:
                fh.write(table)
            click.echo(table)
            _write_run_manifest(out, "evaluate", resolved, extra={
                "cells": [{"source": c.source_model, "attack": c.attack,
                           "target": c.target_model, "asr": c.asr, "n": c.n}
                          for c in cells]})
        else:
            eps_values = _parse_floats(resolved["eps_list"])
            rows = M.perturbation_sweep(
                detectors[0], X, y, eps_values, label_maps=label_maps,
                alpha=float(resolved["alpha"]), iters=int(resolved["iters"]),
                scale=scale,
            )
            M.write_sweep_csv(rows, os.path.join(out, "sweep.csv"))
            table = M.format_sweep_table(rows)
            with open(os.path.join(out, "sweep.txt"), "w") as fh:
                fh.write(table)
            click.echo(table)
            _write_run_manifest(out, "evaluate", resolved, extra={
                "rows": [{"epsilon": r.epsilon, "asr": r.asr, "n": r.n,
                          "mse": r.report.mse, "mae": r.report.mae,
                          "psnr": r.report.psnr, "ssim": r.report.ssim,
                          "value_rate": r.report.value_rate}
                         for r in rows]})
        return 0
    _config_guard(body)


# ---------------------------------------------------------------------------
# visualize
# ---------------------------------------------------------------------------

@main.command("visualize")
@_common_options
@click.option("--run", "run_dir", type=click.Path(), default=None,
              help="attack output directory to visualize")
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--data", "data_dir", type=click.Path(), default=None)
@click.option("--opacity", type=float, default=None)
@click.option("--amplify", type=float, default=None)
def cmd_visualize(config_path, run_dir, model_path, data_dir, **flags):
    """Render CAM overlays, amplified diffs and mask outlines for a run."""
    def body():
        resolved = _resolve(config_path, dict(flags, run=run_dir,
                                              model=model_path, data=data_dir))
        _require(resolved, "out", "run")
        run_path = resolved["run"]
        manifest_file = os.path.join(run_path, "run.json")
        if not os.path.exists(manifest_file):
            raise ConfigurationError(f"no run manifest at {manifest_file}")
        with open(manifest_file) as fh:
            run_manifest = json.load(fh)
        run_config = run_manifest.get("config", {})
        model_file = resolved.get("model") or run_config.get("model")
        data_path = resolved.get("data") or run_config.get("data")
        if not model_file or not data_path:
            raise ConfigurationError("visualize needs --model and --data "
                                     "(or a run manifest that records them)")
        det = _load_detector(model_file)
        samples = read_dataset(data_path, limit=run_config.get("limit"))
        out = resolved["out"]
        os.makedirs(out, exist_ok=True)
        opacity = float(resolved["opacity"])
        amplify = float(resolved["amplify"])

        n_failed = 0
        records = []
        for rec in run_manifest.get("results", []):
            sid = rec["id"]
            if rec.get("error"):
                continue
            try:
                idx = int(sid)
                original = samples[idx].image
                adv = load_image(os.path.join(run_path, rec["adversarial"]))
                mask = load_mask(os.path.join(run_path, rec["mask"]))

                anchor = int(np.argmax(det.predict_one(original)))
                cam_clean = compute_cam(det, original, anchor)
                cam_adv = compute_cam(det, adv, anchor)
                save_image(overlay_cam(original, cam_clean, opacity),
                           os.path.join(out, f"{sid}_cam_clean.png"))
                save_image(overlay_cam(adv, cam_adv, opacity),
                           os.path.join(out, f"{sid}_cam_adv.png"))

                diff = np.clip(0.5 + amplify * (adv - original), 0.0, 1.0)
                save_image(diff.astype(np.float32),
                           os.path.join(out, f"{sid}_diff.png"))

                edge = mask.astype(bool) & ~ndimage.binary_erosion(mask.astype(bool))
                composite = original.copy()
                composite[edge] = np.array([1.0, 0.0, 0.0], dtype=np.float32)
                save_image(composite, os.path.join(out, f"{sid}_mask_edge.png"))
                records.append({"id": sid, "error": None})
            except Exception as e:
                n_failed += 1
                click.echo(f"image {sid} failed: {e}", err=True)
                records.append({"id": sid, "error": str(e)})
        _write_run_manifest(out, "visualize", resolved, extra={
            "results": records, "summary": {"n_failed": n_failed}})
        return 1 if n_failed else 0
    _config_guard(body)


if __name__ == "__main__":
    main()
