"""Pixel-level evaluation: per-image F1 and intersection-over-union, plus
per-dataset and cross-dataset averaging and a plain-text report table.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor import ShapeError


@dataclasses.dataclass(frozen=True)
class EvalResult:
    """Pixel counts and the two overlap scores for one image."""

    tp: int
    fp: int
    fn: int
    f1: float
    iou: float


def pixel_scores(p, g, threshold: float = 0.5) -> EvalResult:
    """Binarize ``p`` at ``threshold`` (ties go to 1) and score it against
    the binary mask ``g``.

    Both maps empty scores 1; exactly one empty scores 0; otherwise
    F1 = 2TP/(2TP+FP+FN) and IoU = TP/(TP+FP+FN).
    """
    pd = np.asarray(getattr(p, "data", p), dtype=np.float64)
    gd = np.asarray(getattr(g, "data", g), dtype=np.float64)
    if pd.shape != gd.shape:
        raise ShapeError(f"pixel_scores: prediction {pd.shape} vs mask {gd.shape}")
    if not np.all((gd == 0.0) | (gd == 1.0)):
        raise ValueError("pixel_scores: mask must be binary")
    pred = pd >= threshold
    truth = gd == 1.0
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp + fp + fn == 0:
        f1 = iou = 1.0
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    return EvalResult(tp=tp, fp=fp, fn=fn, f1=f1, iou=iou)


def dataset_average(groups: dict) -> tuple[dict, tuple]:
    """Mean per-image scores within each dataset, then the unweighted mean
    of those dataset means.

    ``groups`` maps dataset name to a nonempty list of EvalResult. Returns
    ``(per_dataset, overall)`` where each value is an (f1, iou) pair.
    """
    if not groups:
        raise ValueError("dataset_average: no datasets")
    per_dataset = {}
    for name, results in groups.items():
        if not results:
            raise ValueError(f"dataset_average: dataset {name!r} is empty")
        f1 = float(np.mean([r.f1 for r in results]))
        iou = float(np.mean([r.iou for r in results]))
        per_dataset[name] = (f1, iou)
    overall = (
        float(np.mean([v[0] for v in per_dataset.values()])),
        float(np.mean([v[1] for v in per_dataset.values()])),
    )
    return per_dataset, overall


def format_report(groups: dict) -> str:
    """Tab-separated table of dataset, image count, mean F1, mean IoU, with
    a final unweighted-average row."""
    per_dataset, overall = dataset_average(groups)
    lines = ["dataset\tcount\tf1\tiou"]
    for name in sorted(per_dataset):
        f1, iou = per_dataset[name]
        lines.append(f"{name}\t{len(groups[name])}\t{f1:.4f}\t{iou:.4f}")
    lines.append(f"average\t{sum(len(v) for v in groups.values())}\t"
                 f"{overall[0]:.4f}\t{overall[1]:.4f}")
    return "\n".join(lines)
