"""Confusion-matrix accuracy measures and dataset evaluation of a segmenter."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

BACKGROUND, TOOL = 0, 1


class ConfusionMatrix:
    """``L x L`` counts; rows are ground-truth labels, columns predicted labels."""

    def __init__(self, counts):
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or counts.shape[0] < 2:
            raise ValueError(f"confusion matrix must be L x L with L >= 2, got {counts.shape}")
        if not np.issubdtype(counts.dtype, np.integer):
            if not np.all(np.equal(np.mod(counts, 1), 0)):
                raise ValueError("confusion counts must be integers")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts.astype(np.int64)

    @classmethod
    def zeros(cls, n_classes: int = 2) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def gt_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def pred_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.n_classes != self.n_classes:
            raise ValueError("cannot add confusion matrices with different class counts")
        return ConfusionMatrix(self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix({self.counts.tolist()})"

    def to_list(self) -> list[list[int]]:
        return self.counts.tolist()


def _as_matrix(c) -> ConfusionMatrix:
    return c if isinstance(c, ConfusionMatrix) else ConfusionMatrix(c)


def binarize(output, threshold: float = 0.0) -> np.ndarray:
    """1 where ``output > threshold`` (ties go to background), else 0."""
    return (np.asarray(output) > threshold).astype(np.uint8)


def confusion_matrix(gt, pred, n_classes: int = 2) -> ConfusionMatrix:
    gt, pred = np.asarray(gt), np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} differs from prediction shape {pred.shape}")
    for name, labels in (("ground-truth", gt), ("predicted", pred)):
        bad = labels[(labels < 0) | (labels >= n_classes)]
        if bad.size:
            raise ValueError(f"{name} label {bad.flat[0]} outside [0, {n_classes})")
    flat = n_classes * gt.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
    counts = np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts)


def overall_pixel(c) -> float:
    c = _as_matrix(c)
    total = c.total
    if total == 0:
        return float("nan")
    return int(np.trace(c.counts)) / total


def per_class(c) -> float:
    """Mean per-class recall; classes absent from the ground truth are left out."""
    c = _as_matrix(c)
    ratios = [int(c.counts[i, i]) / int(g) for i, g in enumerate(c.gt_totals) if g > 0]
    return sum(ratios) / len(ratios) if ratios else float("nan")


def class_iou(c) -> list[float]:
    """Per-class IoU; NaN for a class absent from both ground truth and prediction."""
    c = _as_matrix(c)
    g, p = c.gt_totals, c.pred_totals
    out = []
    for i in range(c.n_classes):
        union = int(g[i]) + int(p[i]) - int(c.counts[i, i])
        out.append(int(c.counts[i, i]) / union if union > 0 else float("nan"))
    return out


def jaccard(c) -> tuple[list[float], float]:
    ious = class_iou(c)
    present = [v for v in ious if not math.isnan(v)]
    return ious, (sum(present) / len(present) if present else float("nan"))


def summarize(c) -> dict:
    ious, mean = jaccard(c)
    return {
        "op": overall_pixel(c),
        "pc": per_class(c),
        "ji": mean,
        "class_iou": ious,
        "fg_iou": ious[TOOL] if len(ious) > TOOL else float("nan"),
    }


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (the frame counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, border_value=0)


def boundary_f1(gt, pred, tolerance_px: float = 2.0) -> float:
    """F-measure of boundary pixels lying within ``tolerance_px`` (Euclidean) of the other boundary."""
    if tolerance_px < 0:
        raise ValueError("tolerance must be >= 0")
    bg, bp = boundary(gt), boundary(pred)
    if not bg.any() and not bp.any():
        return 1.0
    if not bg.any() or not bp.any():
        return 0.0
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    precision = float((to_gt[bp] <= tolerance_px).mean())
    recall = float((to_pred[bg] <= tolerance_px).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    pooled: ConfusionMatrix
    sequences: dict[str, ConfusionMatrix] = field(default_factory=dict)
    n_samples: int = 0
    n_skipped: int = 0
    boundary_f1: float | None = None
    boundary_tolerance: float | None = None
    sequence_boundary_f1: dict[str, float] = field(default_factory=dict)

    @property
    def metrics(self) -> dict:
        return summarize(self.pooled)

    def sequence_metrics(self) -> dict[str, dict]:
        return {name: summarize(c) for name, c in self.sequences.items()}

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "pooled": {"confusion": self.pooled.to_list(), **self.metrics},
            "sequences": {name: {"confusion": c.to_list(), **summarize(c)}
                          for name, c in self.sequences.items()},
            "boundary_f1": self.boundary_f1,
            "boundary_tolerance": self.boundary_tolerance,
            "sequence_boundary_f1": self.sequence_boundary_f1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(ConfusionMatrix(data["pooled"]["confusion"]),
                   {k: ConfusionMatrix(v["confusion"]) for k, v in data["sequences"].items()},
                   data["n_samples"], data["n_skipped"], data.get("boundary_f1"),
                   data.get("boundary_tolerance"), data.get("sequence_boundary_f1", {}))


def predict_mask(model, image: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Binary ``H x W`` prediction for an ``H x W x C`` image grid.

    ``model`` is either a torch module mapping ``(1, C, H, W)`` to
    ``(1, 1, H, W)`` or a plain callable on the image grid.
    """
    import torch

    if isinstance(model, torch.nn.Module):
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(np.asarray(image, np.float32).transpose(2, 0, 1)))
            out = model(x[None])[0, 0].numpy()
    else:
        out = np.asarray(model(image))
        if out.ndim == 3:
            out = out[..., 0]
    return binarize(out, threshold)


def evaluate(model: Callable | object, eval_set: Iterable, threshold: float = 0.0,
             boundary_tolerance: float | None = None) -> EvalReport:
    """Pool confusion counts over ``eval_set`` items ``(image, gt_mask[, sequence])``.

    Samples whose dims disagree with the mask or the model are skipped and
    counted in ``n_skipped``.
    """
    pooled = ConfusionMatrix.zeros(2)
    sequences: dict[str, ConfusionMatrix] = {}
    bf1: dict[str, list[float]] = {}
    n = skipped = 0
    for item in eval_set:
        image, gt = item[0], np.asarray(item[1])
        seq = item[2] if len(item) > 2 else "all"
        if np.asarray(image).shape[:2] != gt.shape:
            log.warning("skipping sample with image %s and mask %s", np.asarray(image).shape, gt.shape)
            skipped += 1
            continue
        try:
            pred = predict_mask(model, image, threshold)
        except ValueError as exc:
            log.warning("skipping sample: %s", exc)
            skipped += 1
            continue
        if pred.shape != gt.shape:
            skipped += 1
            continue
        c = confusion_matrix(gt.astype(np.int64), pred, 2)
        pooled = pooled + c
        sequences[seq] = sequences.get(seq, ConfusionMatrix.zeros(2)) + c
        if boundary_tolerance is not None:
            bf1.setdefault(seq, []).append(boundary_f1(gt, pred, boundary_tolerance))
        n += 1
    report = EvalReport(pooled, sequences, n, skipped)
    if boundary_tolerance is not None:
        report.boundary_tolerance = boundary_tolerance
        report.sequence_boundary_f1 = {k: float(np.mean(v)) for k, v in bf1.items()}
        scores = [s for v in bf1.values() for s in v]
        report.boundary_f1 = float(np.mean(scores)) if scores else float("nan")
    return report


def format_table(reports: dict[str, EvalReport], metric: str = "ji") -> str:
    """Rows per sequence plus a pooled row, one column per model."""
    names = list(reports)
    seqs = sorted({s for r in reports.values() for s in r.sequences})
    width = max([len(s) for s in seqs] + [len("Pooled"), len("Mean")]) + 2
    col = max([len(n) for n in names] + [7]) + 2
    lines = [" " * width + "".join(n.rjust(col) for n in names)]

    def cell(value):
        return ("-" if value is None or math.isnan(value) else f"{value:.3f}").rjust(col)

    for s in seqs:
        row = [summarize(r.sequences[s])[metric] if s in r.sequences else None
               for r in reports.values()]
        lines.append(s.ljust(width) + "".join(cell(v) for v in row))
    lines.append("-" * (width + col * len(names)))
    means = []
    for r in reports.values():
        vals = [summarize(c)[metric] for c in r.sequences.values()]
        vals = [v for v in vals if not math.isnan(v)]
        means.append(sum(vals) / len(vals) if vals else None)
    lines.append("Mean".ljust(width) + "".join(cell(v) for v in means))
    lines.append("Pooled".ljust(width) + "".join(cell(r.metrics[metric]) for r in reports.values()))
    return "\n".join(lines)
