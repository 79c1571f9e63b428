"""Command-line surface wiring generation, training, and evaluation together.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
Every subcommand records its fully resolved configuration as JSON next to its
outputs, and is deterministic given --seed.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import augment, lossmath, synthgen, tinynet, uncert

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

MODE_ALIASES = {
    "joint": "joint",
    "ce": "ce_only",
    "cl-detached": "cl_detached",
    "cl-attached": "cl_attached",
}


def _record_config(out_dir: Path, command: str, config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"run_config_{command}.json", "w", encoding="utf-8") as f:
        json.dump({"command": command, **config}, f, indent=2, sort_keys=True)
        f.write("\n")


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_spec(spec_path, counts, seed):
    if spec_path:
        try:
            with open(spec_path, encoding="utf-8") as f:
                doc = json.load(f)
        except OSError as err:
            _fail(EXIT_IO, str(err))
        except json.JSONDecodeError as err:
            _fail(EXIT_CONFIG, f"malformed spec JSON at line {err.lineno} column {err.colno}: {err.msg}")
    else:
        doc = {"counts": {name: counts for name in synthgen.CLASS_NAMES}}
    if seed is not None:
        doc["seed"] = seed
    try:
        return synthgen.spec_from_json(doc)
    except (synthgen.ConfigurationError, KeyError, TypeError, ValueError) as err:
        _fail(EXIT_CONFIG, f"invalid generation spec: {err}")


@click.group()
def main():
    """fishforge: synthetic FISH patches, desk-scale training, calibration."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(), default=None, help="GenerationSpec JSON; defaults to the built-in class configs.")
@click.option("--counts", type=int, default=100, show_default=True, help="Patches per class when no spec file is given.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="Overwrite an existing dataset.")
def generate(spec_path, counts, out_dir, seed, force):
    """Synthesize a labeled patch dataset plus its manifest."""
    spec = _load_spec(spec_path, counts, seed)
    out = Path(out_dir)
    _record_config(out, "generate", synthgen.spec_to_json(spec))
    try:
        manifest = synthgen.generate_dataset(spec, out, force=force)
    except FileExistsError as err:
        _fail(EXIT_IO, f"{err} (use --force)")
    except synthgen.ConfigurationError as err:
        _fail(EXIT_CONFIG, str(err))
    except OSError as err:
        _fail(EXIT_IO, str(err))
    per_class = {}
    for entry in synthgen.read_manifest(manifest):
        per_class[entry["class_id"]] = per_class.get(entry["class_id"], 0) + 1
    for name in synthgen.CLASS_NAMES:
        click.echo(f"{name}: {per_class.get(name, 0)}")
    click.echo(f"manifest: {manifest}")


def _train_config(mode, preset, epochs, seed, tau, lam, alpha, batch_size, pretrain_epochs):
    try:
        loss_cfg = lossmath.LossConfig(tau=tau, lambda_=lam, alpha=alpha)
        return tinynet.TrainConfig(
            mode=MODE_ALIASES[mode],
            preset=preset,
            epochs=epochs,
            seed=seed,
            batch_size=batch_size,
            pretrain_epochs=pretrain_epochs,
            loss=loss_cfg,
        )
    except (tinynet.TrainingError, lossmath.LossDomainError) as err:
        _fail(EXIT_CONFIG, str(err))


def _load_samples(manifest):
    try:
        return tinynet.load_dataset(manifest)
    except OSError as err:
        _fail(EXIT_IO, str(err))
    except (KeyError, ValueError) as err:
        _fail(EXIT_CONFIG, f"bad manifest: {err}")


@main.command()
@click.option("--data", "manifest", type=click.Path(exists=True), required=True, help="Dataset manifest (JSON Lines).")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mode", type=click.Choice(list(MODE_ALIASES)), default="joint", show_default=True)
@click.option("--preset", type=click.Choice(list(augment.PRESETS)), default="heavy", show_default=True)
@click.option("--epochs", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--tau", type=float, default=0.05, show_default=True)
@click.option("--lam", "--lambda", type=float, default=0.5, show_default=True)
@click.option("--alpha", type=float, default=0.01, show_default=True)
@click.option("--batch-size", type=int, default=128, show_default=True)
@click.option("--pretrain-epochs", type=int, default=None, help="Contrastive pretraining epochs for the two-phase modes.")
def train(manifest, out_dir, mode, preset, epochs, seed, tau, lam, alpha, batch_size, pretrain_epochs):
    """Train a classifier; writes checkpoint.ffm and a JSON training log."""
    cfg = _train_config(mode, preset, epochs, seed, tau, lam, alpha, batch_size, pretrain_epochs)
    out = Path(out_dir)
    _record_config(out, "train", {
        "data": str(manifest), "mode": cfg.mode, "preset": preset, "epochs": epochs,
        "seed": seed, "tau": tau, "lambda": lam, "alpha": alpha,
        "batch_size": batch_size, "pretrain_epochs": pretrain_epochs,
    })
    samples = _load_samples(manifest)
    try:
        ckpt, log = tinynet.train(
            samples, cfg,
            log_fn=lambda e: click.echo(
                f"epoch {e['epoch']:3d} [{e['phase']}] loss {e['train_loss']:.4f}"
                + (f" val_acc {e['val_accuracy']:.3f}" if "val_accuracy" in e else "")
            ),
        )
    except tinynet.TrainingError as err:
        _fail(EXIT_NUMERIC, str(err))
    tinynet.save_checkpoint(ckpt, out / "checkpoint.ffm")
    with open(out / "training_log.json", "w", encoding="utf-8") as f:
        json.dump(log, f, indent=2)
    click.echo(f"checkpoint: {out / 'checkpoint.ffm'}")


def _split_samples(samples, split, seed):
    if split == "all":
        return samples
    rng = np.random.default_rng(seed)
    train_s, val_s, test_s = tinynet.split_dataset(samples, rng)
    return {"train": train_s, "val": val_s, "test": test_s}[split]


@main.command("eval")
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--data", "manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(["all", "train", "val", "test"]), default="all", show_default=True, help="Evaluate a deterministic subset (split derives from the checkpoint seed).")
def eval_cmd(ckpt_path, manifest, out_dir, split):
    """Predict on a dataset; writes predictions.csv and summary accuracy."""
    out = Path(out_dir)
    _record_config(out, "eval", {"checkpoint": str(ckpt_path), "data": str(manifest), "split": split})
    try:
        ckpt = tinynet.load_checkpoint(ckpt_path)
    except (tinynet.TrainingError, OSError) as err:
        _fail(EXIT_IO, f"cannot load checkpoint: {err}")
    samples = _load_samples(manifest)
    samples = _split_samples(samples, split, ckpt["meta"].get("seed", 0))
    records = tinynet.predict(ckpt, samples)
    uncert.write_predictions_csv(out / "predictions.csv", records)
    acc = sum(r.correct for r in records) / len(records)
    click.echo(f"samples: {len(records)}  accuracy: {acc:.4f}")
    click.echo(f"predictions: {out / 'predictions.csv'}")


@main.command()
@click.option("--predictions", type=click.Path(exists=True), required=True)
@click.option("--bins", type=int, default=10, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def calibrate(predictions, bins, out_dir):
    """Binned calibration report with the signed ECE decomposition."""
    out = Path(out_dir)
    _record_config(out, "calibrate", {"predictions": str(predictions), "bins": bins})
    records = uncert.read_predictions_csv(predictions)
    try:
        report = uncert.ece(records, n_bins=bins)
    except uncert.UncertError as err:
        _fail(EXIT_NUMERIC, str(err))
    with open(out / "calibration.json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2)
    with open(out / "calibration.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count", "mean_certainty", "accuracy"])
        for k in range(bins):
            w.writerow([
                f"{report.bin_edges[k]:.6g}", f"{report.bin_edges[k + 1]:.6g}",
                report.bin_counts[k], f"{report.bin_certainty[k]:.9g}",
                f"{report.bin_accuracy[k]:.9g}",
            ])
    click.echo(f"ECE {report.ece:.5f}  posECE {report.pos_ece:.5f}  negECE {report.neg_ece:.5f}")


@main.command()
@click.option("--predictions", type=click.Path(exists=True), required=True)
@click.option("--retain", default="100,95,90,75,50,40,30,20,15,10,5", show_default=True, help="Comma-separated retain percentages.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def condition(predictions, retain, out_dir):
    """Accuracy after excluding the most uncertain samples."""
    out = Path(out_dir)
    _record_config(out, "condition", {"predictions": str(predictions), "retain": retain})
    try:
        fractions = [float(p) / 100.0 for p in retain.split(",")]
    except ValueError as err:
        _fail(EXIT_CONFIG, f"bad retain list: {err}")
    records = uncert.read_predictions_csv(predictions)
    try:
        rows = uncert.condition_on_certainty(records, fractions)
    except uncert.UncertError as err:
        _fail(EXIT_NUMERIC, str(err))
    with open(out / "conditioning.json", "w", encoding="utf-8") as f:
        json.dump([{k: v for k, v in r.items() if k != "retained_ids"} for r in rows], f, indent=2)
    with open(out / "conditioning.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        n_classes = len(rows[0]["class_share"])
        w.writerow(["retain_pct", "n_retained", "accuracy"] + [f"share_class{c}" for c in range(n_classes)])
        for r in rows:
            w.writerow(
                [f"{r['retain_fraction'] * 100:g}", r["n_retained"], f"{r['accuracy']:.9g}"]
                + [f"{s:.9g}" for s in r["class_share"]]
            )
    for r in rows:
        click.echo(f"retain {r['retain_fraction'] * 100:5.1f}%  n {r['n_retained']:6d}  acc {r['accuracy']:.4f}")


@main.command()
@click.option("--manifest", type=click.Path(exists=True), required=True)
@click.option("--annotations", "annotation_files", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def agreement(manifest, annotation_files, out_dir):
    """Annotator-agreement entropy and per-annotator accuracy."""
    out = Path(out_dir)
    _record_config(out, "agreement", {"manifest": str(manifest), "annotations": [str(a) for a in annotation_files]})
    truth = {
        e["id"]: tinynet.CLASS_TO_INDEX[e["class_id"]]
        for e in synthgen.read_manifest(manifest)
    }
    try:
        sets = [uncert.load_annotation_file(p) for p in annotation_files]
    except (KeyError, ValueError, json.JSONDecodeError) as err:
        _fail(EXIT_CONFIG, f"bad annotation file: {err}")
    try:
        result = uncert.agreement_entropy(sets, truth)
    except uncert.UncertError as err:
        _fail(EXIT_CONFIG, str(err))
    with open(out / "agreement.json", "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    click.echo(
        f"annotators: {len(sets)}  accuracy mean {result['accuracy_mean']:.4f} "
        f"± {result['accuracy_std']:.4f}"
    )


@main.command()
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--data", "manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def embed(ckpt_path, manifest, out_dir):
    """Export representation-space embeddings as CSV (id, true_label, r0..)."""
    out = Path(out_dir)
    _record_config(out, "embed", {"checkpoint": str(ckpt_path), "data": str(manifest)})
    ckpt = tinynet.load_checkpoint(ckpt_path)
    samples = _load_samples(manifest)
    reps = tinynet.embed(ckpt, samples)
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "true_label"] + [f"r{i}" for i in range(reps.shape[1])])
        for s, row in zip(samples, reps):
            w.writerow([s.id, s.label] + [f"{v:.9g}" for v in row])
    click.echo(f"embeddings: {out / 'embeddings.csv'} ({reps.shape[0]} x {reps.shape[1]})")


@main.command("preview-augment")
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--preset", type=click.Choice(list(augment.PRESETS)), default="heavy", show_default=True)
@click.option("--grid", type=int, default=4, show_default=True, help="Grid side length.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
def preview_augment(image_path, preset, grid, seed, out_path):
    """Emit a grid PNG of augmented variants of one input patch."""
    out = Path(out_path)
    _record_config(out.parent, "preview_augment", {"image": str(image_path), "preset": preset, "grid": grid, "seed": seed})
    arr = np.asarray(Image.open(image_path).convert("RGB")).astype(np.float64) / 255.0
    rng = np.random.default_rng(seed)
    p = augment.PRESETS[preset]
    h, w = arr.shape[:2]
    canvas = np.zeros((grid * h, grid * w, 3))
    for gy in range(grid):
        for gx in range(grid):
            t = augment.sample_transform(p, rng)
            canvas[gy * h : (gy + 1) * h, gx * w : (gx + 1) * w] = augment.apply(t, arr, rng)
    Image.fromarray(synthgen.quantize(canvas), mode="RGB").save(out, format="PNG")
    click.echo(f"preview: {out}")


ABLATION_ORDER = ["none", "all", "affine", "blur", "flip", "grad", "noise", "int", "grad_noise"]


@main.command()
@click.option("--data", "manifest", type=click.Path(exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--epochs", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def ablation(manifest, out_dir, epochs, seed):
    """Leave-one-out augmentation ablation; emits an accuracy matrix CSV."""
    out = Path(out_dir)
    _record_config(out, "ablation", {"data": str(manifest), "epochs": epochs, "seed": seed})
    samples = _load_samples(manifest)

    presets = {"none": augment.NONE, "all": augment.HEAVY}
    for col, groups in augment.ABLATION_COLUMNS.items():
        presets[col] = augment.HEAVY.without(*groups)

    accuracies = {}
    for col in ABLATION_ORDER:
        p = presets[col]
        augment.PRESETS[p.name] = p  # register so TrainConfig can reference it
        cfg = tinynet.TrainConfig(mode="joint", preset=p.name, epochs=epochs, seed=seed)
        try:
            ckpt, _ = tinynet.train(samples, cfg)
        except tinynet.TrainingError as err:
            _fail(EXIT_NUMERIC, f"column {col}: {err}")
        rng = np.random.default_rng(seed)
        _, _, test_set = tinynet.split_dataset(samples, rng)
        records = tinynet.predict(ckpt, test_set)
        accuracies[col] = sum(r.correct for r in records) / len(records)
        click.echo(f"{col:>10}: {accuracies[col]:.4f}")

    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_ORDER)
        w.writerow([f"{accuracies[c]:.4f}" for c in ABLATION_ORDER])
    click.echo(f"ablation table: {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
