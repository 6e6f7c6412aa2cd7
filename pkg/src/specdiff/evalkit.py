"""Pixel-level precision/recall sweeps, AP and MaxF1, and dataset reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .losses import BORDER_MARGIN

__all__ = [
    "PRCurve",
    "EvalReport",
    "pr_curve",
    "average_precision",
    "max_f1",
    "evaluate_pairs",
    "evaluate_dataset",
    "model_predictor",
    "write_overlay",
]

log = logging.getLogger(__name__)


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def _valid(a, margin):
    if margin <= 0:
        return a
    return a[..., margin:-margin, margin:-margin]


def pr_curve(pred, gt, n_thresholds=256, margin=0):
    """Precision and recall of ``pred >= t`` for ``n_thresholds`` evenly
    spaced thresholds from 1 down to 0.

    Precision is 1 when nothing is predicted positive; recall is 1 when the
    ground truth is empty.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if n_thresholds < 2:
        raise ValueError("n_thresholds must be >= 2")
    pred = _valid(pred, margin).ravel()
    gt = _valid(gt, margin).ravel().astype(bool)
    thresholds = 1.0 - np.arange(n_thresholds) / (n_thresholds - 1)
    pos = np.sort(pred[gt])
    neg = np.sort(pred[~gt])
    # count of values >= t
    tp = len(pos) - np.searchsorted(pos, thresholds, side="left")
    fp = len(neg) - np.searchsorted(neg, thresholds, side="left")
    predicted = tp + fp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
        recall = np.where(len(pos) > 0, tp / max(len(pos), 1), 1.0)
    return PRCurve(thresholds, precision.astype(np.float64), np.broadcast_to(recall, thresholds.shape).astype(np.float64))


def average_precision(curve):
    """Step-sum area under the curve, ordered by increasing recall."""
    order = np.argsort(curve.recall, kind="stable")
    r = curve.recall[order]
    p = curve.precision[order]
    prev = np.concatenate([[0.0], r[:-1]])
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(((r - prev) * p).tolist())


def max_f1(curve):
    """Best F1 over thresholds and the threshold achieving it."""
    p, r = curve.precision, curve.recall
    denom = p + r
    f1 = np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1.0), 0.0)
    i = int(np.argmax(f1))
    return float(f1[i]), float(curve.thresholds[i])


@dataclass
class EvalReport:
    ap: float
    max_f1: float
    per_pair: list = field(default_factory=list)
    skipped: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_overlay(source, pred, path):
    """Prediction painted red over the grayscale source."""
    base = np.clip(np.asarray(source, dtype=np.float64), 0, 1)
    a = np.clip(np.asarray(pred, dtype=np.float64), 0, 1)
    rgb = np.stack([base * (1 - a) + a, base * (1 - a), base * (1 - a)], axis=-1)
    Image.fromarray(np.rint(rgb * 255).astype(np.uint8), mode="RGB").save(path, format="PNG")


def model_predictor(net, use_mask=True, alignment="estimated"):
    """Wrap a network as ``pair -> defect map`` (numpy)."""
    from .diffnet import full_forward
    from .training import align_template

    class _Aligned:
        def __init__(self, aligned):
            self.aligned_template = aligned

    def predict(pair):
        reg = None
        if alignment == "ground_truth" and pair.gt_pose is not None:
            reg = _Aligned(align_template(pair, "ground_truth"))
        with torch.no_grad():
            out = full_forward(net, pair.template, pair.source, registration=reg, use_mask=use_mask)
        return out.defect_map.detach().cpu().numpy().astype(np.float64)

    return predict


def evaluate_pairs(pairs, predict, n_thresholds=256, margin=BORDER_MARGIN, overlays_dir=None):
    """Per-pair AP/MaxF1 for ``predict(pair) -> map`` and their means."""
    rows = []
    if overlays_dir is not None:
        Path(overlays_dir).mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        pid = pair.pair_id or f"{i:06d}"
        pred = predict(pair)
        curve = pr_curve(pred, pair.gt_mask, n_thresholds, margin)
        f1, thr = max_f1(curve)
        rows.append({"id": pid, "ap": average_precision(curve), "max_f1": f1, "best_threshold": thr})
        if overlays_dir is not None:
            write_overlay(pair.source, pred, Path(overlays_dir) / f"{pid}_overlay.png")
    rows.sort(key=lambda r: r["id"])
    ap = float(np.mean([r["ap"] for r in rows])) if rows else float("nan")
    f1 = float(np.mean([r["max_f1"] for r in rows])) if rows else float("nan")
    return EvalReport(ap, f1, rows)


def evaluate_dataset(model, dataset_dir, n_thresholds=256, predictor=None, report_path=None,
                     overlays_dir=None, use_mask=True, margin=BORDER_MARGIN):
    """Evaluate ``model`` (or an explicit ``predictor`` hook) on a dataset directory.

    Unreadable pairs are skipped and counted in ``report.skipped``.
    """
    from .simgen import read_dataset

    pairs, skipped = read_dataset(dataset_dir, strict=False)
    if skipped:
        log.warning("skipped %d unreadable pairs in %s", skipped, dataset_dir)
    predict = predictor or model_predictor(model, use_mask=use_mask)
    report = evaluate_pairs(pairs, predict, n_thresholds, margin, overlays_dir)
    report.skipped = skipped
    report.config = {"dataset": str(dataset_dir), "n_thresholds": n_thresholds, "margin": margin,
                     "use_mask": use_mask, "count": len(pairs)}
    if report_path is not None:
        report.write(report_path)
    return report
