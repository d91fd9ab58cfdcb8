"""Accuracy, modality ratio, reshape counts and metric exports."""

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

UNDEFINED = "undefined"


@dataclass
class MetricsRow:
    epoch: int
    acc_fused: float
    acc_modality: list
    ratio: float | None          # modality 0 accuracy over modality 1 accuracy
    reshape_counts: list
    loss_fused: float
    loss_modality: list
    test_loss_fused: float = math.nan

    def __post_init__(self):
        accs = [self.acc_fused, *self.acc_modality]
        if any(not 0.0 <= a <= 1.0 for a in accs):
            raise ValueError(f"accuracies must lie in [0, 1]: {accs}")
        if self.ratio is not None and not self.ratio > 0:
            raise ValueError(f"ratio must be positive, got {self.ratio}")
        if any(int(c) != c or c < 0 for c in self.reshape_counts):
            raise ValueError(f"reshape counts must be non-negative integers: {self.reshape_counts}")


def predictions(probs):
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(np.atleast_2d(probs), axis=-1)


def accuracy(probs, labels):
    """Fraction of rows whose argmax equals the true class.

    ``labels`` may be one-hot rows or class indices.
    """
    probs = np.atleast_2d(np.asarray(probs))
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if labels.ndim == 2:
        labels = np.argmax(labels, axis=-1)
    if labels.shape[0] != probs.shape[0]:
        raise ValueError(f"{probs.shape[0]} predictions vs {labels.shape[0]} labels")
    return float(np.mean(predictions(probs) == labels))


def modality_ratio(acc_first, acc_second):
    """acc_first / acc_second as a positive real.

    ``None`` (reported as "undefined") when either accuracy is zero, since
    no positive ratio exists then.
    """
    if not (acc_second > 0 and acc_first > 0):
        return None
    return acc_first / acc_second


def format_ratio(r, digits=2):
    return UNDEFINED if r is None else f"{r:.{digits}f}"


def reshape_counts(batches):
    """Total active samples per modality over an iterable of ReshapeBatch."""
    total = None
    for b in batches:
        c = b.active.sum(axis=0).astype(int)
        total = c if total is None else total + c
    return [] if total is None else [int(v) for v in total]


def topk_class_frequency(probs, labels, k=3):
    """table[true, pred] = how often ``pred`` sits in the top-k of a sample of class ``true``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    C = probs.shape[1]
    if not 1 <= k <= C:
        raise ValueError(f"k must be in [1, {C}], got {k}")
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = np.argmax(labels, axis=-1)
    # stable sort on -p keeps lower class indices first among ties
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    table = np.zeros((C, C), dtype=int)
    for true, row in zip(labels, top):
        table[true, row] += 1
    return table


def fmt6(x):
    if x is None:
        return UNDEFINED
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".6g")


def csv_header(n_modalities):
    M = n_modalities
    return (
        ["epoch", "loss_fused"]
        + [f"loss_m{u}" for u in range(M)]
        + ["test_loss_fused", "acc_fused"]
        + [f"acc_m{u}" for u in range(M)]
        + ["ratio_m0_over_m1"]
        + [f"reshape_m{u}" for u in range(M)]
    )


def _csv_row(r):
    return (
        [str(r.epoch), fmt6(r.loss_fused)]
        + [fmt6(v) for v in r.loss_modality]
        + [fmt6(r.test_loss_fused), fmt6(r.acc_fused)]
        + [fmt6(v) for v in r.acc_modality]
        + [fmt6(r.ratio)]
        + [str(int(c)) for c in r.reshape_counts]
    )


def _json_row(r):
    d = asdict(r)
    for k, v in d.items():
        if isinstance(v, float):
            d[k] = None if math.isnan(v) else float(fmt6(v))
        elif isinstance(v, list):
            d[k] = [float(fmt6(x)) if isinstance(x, float) else int(x) for x in v]
    return d


def export(rows, path, fmt="csv", n_modalities=2):
    """Write metric rows as CSV (fixed columns) or JSON (field names of MetricsRow)."""
    path = Path(path)
    try:
        if fmt == "csv":
            if rows:
                n_modalities = len(rows[0].acc_modality)
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(csv_header(n_modalities))
                for r in rows:
                    w.writerow(_csv_row(r))
        elif fmt == "json":
            path.write_text(json.dumps([_json_row(r) for r in rows], indent=2) + "\n")
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"could not write metrics to {path}: {exc}") from exc
    return path


def export_topk(table, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true_class", "predicted_class", "count"])
        C = table.shape[0]
        for t in range(C):
            for p in range(C):
                w.writerow([t, p, int(table[t, p])])
