"""Aleatoric uncertainty scoring, calibration metrics, and certainty-based
conditioning.

Certainty of a prediction is 1 - clamp(H_norm, 0, 1) where H_norm is the
softmax entropy, shifted by the label-smoothing entropy floor and divided by
log(C). Natural log is used throughout; the log(C) normalization makes the
base choice irrelevant.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


class UncertError(ValueError):
    """Raised on malformed inputs to the uncertainty routines."""


@dataclass
class PredictionRecord:
    """One classified sample: softmax probabilities plus its certainty score."""

    id: str
    true_label: int
    probs: np.ndarray
    certainty: float

    @property
    def predicted(self) -> int:
        # argmax with ties broken by lowest class index (np.argmax does this)
        return int(np.argmax(self.probs))

    @property
    def correct(self) -> bool:
        return self.predicted == self.true_label


@dataclass
class CalibrationReport:
    """Binned calibration summary with the signed ECE decomposition."""

    bin_edges: list[float]
    bin_counts: list[int]
    bin_certainty: list[float]
    bin_accuracy: list[float]
    ece: float
    pos_ece: float
    neg_ece: float

    def to_dict(self) -> dict:
        return {
            "bin_edges": self.bin_edges,
            "bin_counts": self.bin_counts,
            "bin_certainty": self.bin_certainty,
            "bin_accuracy": self.bin_accuracy,
            "ece": self.ece,
            "pos_ece": self.pos_ece,
            "neg_ece": self.neg_ece,
        }


@dataclass
class AnnotationSet:
    """All class choices of one annotator, keyed by image id."""

    annotator_id: str
    labels: dict[str, int] = field(default_factory=dict)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 * log 0 := 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise UncertError(f"not a probability vector: {p}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def min_entropy(alpha: float, n_classes: int) -> float:
    """Entropy floor of a label-smoothed one-hot target."""
    if not 0 <= alpha < 1:
        raise UncertError(f"alpha must be in [0,1), got {alpha}")
    if n_classes < 2:
        raise UncertError(f"need at least 2 classes, got {n_classes}")
    t = np.full(n_classes, alpha / (n_classes - 1))
    t[0] = 1.0 - alpha
    return entropy(t)


def normalized_entropy(p: np.ndarray, alpha: float, n_classes: int) -> float:
    """Raw normalized entropy (H(p) - H_min(alpha, C)) / log C.

    May be slightly negative when p is sharper than the smoothed target;
    callers clamp for certainty (see :func:`certainty`).
    """
    return (entropy(p) - min_entropy(alpha, n_classes)) / math.log(n_classes)


def certainty(p: np.ndarray, alpha: float, n_classes: int) -> float:
    """1 - clamp(H_norm, 0, 1)."""
    h = normalized_entropy(p, alpha, n_classes)
    return 1.0 - min(max(h, 0.0), 1.0)


def ece(records: list[PredictionRecord], n_bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width certainty bins.

    conf_k is the mean certainty inside bin k (not the bin midpoint).
    pos_ece accumulates overconfidence max(conf - acc, 0), neg_ece
    underconfidence; their sum equals ece exactly.
    """
    if not records:
        raise UncertError("no records to calibrate")
    if n_bins < 1:
        raise UncertError(f"need at least 1 bin, got {n_bins}")
    n = len(records)
    cert = np.array([r.certainty for r in records])
    correct = np.array([r.correct for r in records], dtype=np.float64)
    idx = np.minimum((cert * n_bins).astype(int), n_bins - 1)

    counts, confs, accs = [], [], []
    e = pos = neg = 0.0
    for k in range(n_bins):
        sel = idx == k
        cnt = int(sel.sum())
        counts.append(cnt)
        if cnt == 0:
            confs.append(0.0)
            accs.append(0.0)
            continue
        conf_k = float(cert[sel].mean())
        acc_k = float(correct[sel].mean())
        confs.append(conf_k)
        accs.append(acc_k)
        w = cnt / n
        gap = conf_k - acc_k
        e += w * abs(gap)
        pos += w * max(gap, 0.0)
        neg += w * max(-gap, 0.0)

    edges = [k / n_bins for k in range(n_bins + 1)]
    return CalibrationReport(edges, counts, confs, accs, e, pos, neg)


def condition_on_certainty(
    records: list[PredictionRecord],
    retain_fractions: list[float],
    n_classes: int = 3,
) -> list[dict]:
    """Accuracy and class composition after dropping the least certain samples.

    Records are sorted by descending certainty (ties broken by id so the
    retained sets are deterministic and nested); for each fraction p the top
    ceil(p * n) records are kept.
    """
    if not records:
        raise UncertError("no records to condition")
    order = sorted(records, key=lambda r: (-r.certainty, r.id))
    n = len(order)
    rows = []
    for p in retain_fractions:
        k = math.ceil(p * n)
        kept = order[:k]
        acc = sum(r.correct for r in kept) / k
        shares = [sum(r.true_label == c for r in kept) / k for c in range(n_classes)]
        rows.append(
            {
                "retain_fraction": p,
                "n_retained": k,
                "accuracy": acc,
                "class_share": shares,
                "retained_ids": [r.id for r in kept],
            }
        )
    return rows


DEFAULT_RETAIN_GRID = [1.0, 0.95, 0.90, 0.75, 0.50, 0.40, 0.30, 0.20, 0.15, 0.10, 0.05]


def agreement_entropy(
    annotations: list[AnnotationSet],
    truth: dict[str, int],
    n_classes: int = 3,
) -> dict:
    """Per-image human certainty from annotator agreement, plus accuracies.

    Every annotator must cover every image in ``truth``. Human uncertainty is
    the plain normalized entropy H/log C of the empirical label distribution
    (no smoothing floor); human certainty is its complement.
    """
    if len(annotations) < 2:
        raise UncertError("need at least 2 annotators")
    image_ids = sorted(truth)
    for ann in annotations:
        missing = [i for i in image_ids if i not in ann.labels]
        if missing:
            raise UncertError(
                f"annotator {ann.annotator_id} missing {len(missing)} images "
                f"(first: {missing[0]})"
            )

    per_image = {}
    for img in image_ids:
        votes = np.zeros(n_classes)
        for ann in annotations:
            label = ann.labels[img]
            if not 0 <= label < n_classes:
                raise UncertError(f"label {label} out of range for image {img}")
            votes[label] += 1
        dist = votes / votes.sum()
        h_norm = entropy(dist) / math.log(n_classes)
        per_image[img] = {"human_uncertainty": h_norm, "human_certainty": 1.0 - h_norm}

    accuracies = {
        ann.annotator_id: sum(ann.labels[i] == truth[i] for i in image_ids) / len(image_ids)
        for ann in annotations
    }
    accs = np.array(list(accuracies.values()))
    return {
        "per_image": per_image,
        "annotator_accuracy": accuracies,
        "accuracy_mean": float(accs.mean()),
        "accuracy_std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
    }


def certainty_by_signal_count(
    records: list[PredictionRecord],
    n_green_by_id: dict[str, int],
    human_certainty_by_id: dict[str, float] | None = None,
) -> list[dict]:
    """Mean and std of certainty grouped by ground-truth green-signal count."""
    groups: dict[int, list] = {}
    for r in records:
        if r.id not in n_green_by_id:
            raise UncertError(f"record {r.id} not found in manifest")
        groups.setdefault(n_green_by_id[r.id], []).append(r)

    rows = []
    for n_green in sorted(groups):
        rs = groups[n_green]
        certs = np.array([r.certainty for r in rs])
        row = {
            "n_green": n_green,
            "count": len(rs),
            "certainty_mean": float(certs.mean()),
            "certainty_std": float(certs.std()),
        }
        if human_certainty_by_id is not None:
            hc = np.array([human_certainty_by_id[r.id] for r in rs if r.id in human_certainty_by_id])
            if hc.size:
                row["human_certainty_mean"] = float(hc.mean())
                row["human_certainty_std"] = float(hc.std())
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# file emitters / loaders


def write_predictions_csv(path, records: list[PredictionRecord]) -> None:
    """CSV with header id,true_label,p0..p{C-1},certainty at 9 significant digits."""
    n_classes = len(records[0].probs)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "true_label"] + [f"p{c}" for c in range(n_classes)] + ["certainty"])
        for r in records:
            w.writerow(
                [r.id, r.true_label]
                + [f"{p:.9g}" for p in r.probs]
                + [f"{r.certainty:.9g}"]
            )


def read_predictions_csv(path) -> list[PredictionRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        prob_cols = [c for c in reader.fieldnames if c.startswith("p") and c[1:].isdigit()]
        records = []
        for row in reader:
            probs = np.array([float(row[c]) for c in prob_cols])
            records.append(
                PredictionRecord(
                    id=row["id"],
                    true_label=int(row["true_label"]),
                    probs=probs,
                    certainty=float(row["certainty"]),
                )
            )
    return records


def load_annotation_file(path) -> AnnotationSet:
    """Parse the shared annotation JSON contract.

    Schema: {"annotator_id": str,
             "annotations": [{"image_id", "label", "timestamp_iso8601"}, ...]}
    """
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    ann = AnnotationSet(annotator_id=str(doc["annotator_id"]))
    for entry in doc["annotations"]:
        ann.labels[str(entry["image_id"])] = int(entry["label"])
    return ann
