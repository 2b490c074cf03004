"""Evaluation protocol: confusion counts, accuracy, balance error rate."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n_p(self) -> int:
        return self.tp + self.fn

    @property
    def n_n(self) -> int:
        return self.tn + self.fp


def confusion(pred: Tensor, gt: Tensor, threshold: float = 0.5) -> Confusion:
    """Binarize pred at threshold (>= counts positive) and tally against gt."""
    if pred.data.shape != gt.data.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    g = gt.data
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("ground truth mask must be strictly binary")
    pos = g == 1
    pred_pos = pred.data >= threshold
    return Confusion(tp=int((pred_pos & pos).sum()),
                     tn=int((~pred_pos & ~pos).sum()),
                     fp=int((pred_pos & ~pos).sum()),
                     fn=int((~pred_pos & pos).sum()))


def accuracy(c: Confusion) -> float:
    """Fraction of correctly classified pixels."""
    total = c.n_p + c.n_n
    if total == 0:
        raise ValueError("accuracy undefined for an empty image")
    return (c.tp + c.tn) / total


def ber(c: Confusion) -> float:
    """Balance error rate in percent: 100 (1 - (TP/Np + TN/Nn) / 2).

    Equally weights shadow and non-shadow recall; lower is better.
    Undefined when either class is absent from the ground truth.
    """
    if c.n_p == 0 or c.n_n == 0:
        raise ValueError(
            f"BER undefined: ground truth has n_p={c.n_p}, n_n={c.n_n}; "
            f"skip images missing a class")
    return (1.0 - 0.5 * (c.tp / c.n_p + c.tn / c.n_n)) * 100.0


@dataclass
class ImageResult:
    image_id: str
    conf: Confusion
    accuracy: float
    ber: float | None  # None when a class is absent


@dataclass
class DatasetResult:
    """Per-image rows plus mean-of-image aggregates.

    Aggregation averages per-image accuracy/BER rather than pooling counts;
    images where BER is undefined are skipped in the BER mean only.
    """

    rows: list[ImageResult]
    mean_accuracy: float
    mean_ber: float | None
    skipped_ber: int


def evaluate_pairs(pairs, threshold: float = 0.5) -> DatasetResult:
    """pairs: iterable of (image_id, prediction Tensor, ground truth Tensor)."""
    rows = []
    for image_id, pred, gt in pairs:
        c = confusion(pred, gt, threshold)
        b = ber(c) if (c.n_p > 0 and c.n_n > 0) else None
        rows.append(ImageResult(image_id, c, accuracy(c), b))
    if not rows:
        raise ValueError("no images to evaluate")
    bers = [r.ber for r in rows if r.ber is not None]
    return DatasetResult(
        rows=rows,
        mean_accuracy=float(np.mean([r.accuracy for r in rows])),
        mean_ber=float(np.mean(bers)) if bers else None,
        skipped_ber=len(rows) - len(bers),
    )


def write_metrics_csv(result: DatasetResult, path) -> None:
    """Per-image rows plus a final 'aggregate' row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "tp", "tn", "fp", "fn", "accuracy", "ber"])
        for r in result.rows:
            w.writerow([r.image_id, r.conf.tp, r.conf.tn, r.conf.fp, r.conf.fn,
                        f"{r.accuracy:.6f}", "" if r.ber is None else f"{r.ber:.6f}"])
        w.writerow(["aggregate", "", "", "", "", f"{result.mean_accuracy:.6f}",
                    "" if result.mean_ber is None else f"{result.mean_ber:.6f}"])
