"""Dice and average symmetric surface distance, aggregated per class.

ASD convention: a boundary pixel of a mask is a mask pixel with at least
one 4-neighbour outside the mask (the image border counts as outside);
distances are Euclidean between pixel centres, in pixels.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")


def dice(pred, gt, c: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    p, g = pred == c, gt == c
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """4-connectivity inner boundary of a boolean mask."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every pixel of ``src`` (row-major order) to the nearest pixel of ``dst``."""
    field_ = distance_transform_edt(~dst)
    return field_[src]


def asd(pred, gt, c: int) -> float | None:
    """Average symmetric surface distance for class ``c``; None when a boundary is empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_shapes(pred, gt)
    bp, bg = boundary(pred == c), boundary(gt == c)
    if not bp.any() or not bg.any():
        return None
    # summing each direction separately keeps asd(P, G) == asd(G, P) bit-exactly
    forward, reverse = _surface_distances(bp, bg), _surface_distances(bg, bp)
    return float((forward.sum() + reverse.sum()) / (forward.size + reverse.size))


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


@dataclass
class ClassMetrics:
    dice_mean: float
    dice_std: float
    asd_mean: float
    asd_std: float
    n_asd_excluded: int


@dataclass
class MetricReport:
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)
    dice_avg_mean: float = 0.0
    dice_avg_std: float = 0.0
    asd_avg_mean: float = 0.0
    asd_avg_std: float = 0.0
    n_samples: int = 0
    n_asd_excluded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in d["per_class"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        per_class = {int(k): ClassMetrics(**v) for k, v in d.pop("per_class").items()}
        return cls(per_class=per_class, **d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def classes(self) -> list[int]:
        return sorted(self.per_class)


def report_from_masks(preds, gts, num_classes: int) -> MetricReport:
    """Per-sample metrics for every foreground class, then mean +- std across samples.

    The "avg" columns are computed per sample (mean over the classes that
    are defined for that sample) and then aggregated, like a table's Avg.
    """
    preds, gts = np.asarray(preds), np.asarray(gts)
    _check_shapes(preds, gts)
    classes = range(1, num_classes)
    dices = {c: [] for c in classes}
    asds = {c: [] for c in classes}
    excluded = {c: 0 for c in classes}
    avg_dice, avg_asd = [], []
    for pred, gt in zip(preds, gts):
        sample_d, sample_a = [], []
        for c in classes:
            d = dice(pred, gt, c)
            dices[c].append(d)
            sample_d.append(d)
            a = asd(pred, gt, c)
            if a is None:
                excluded[c] += 1
            else:
                asds[c].append(a)
                sample_a.append(a)
        avg_dice.append(float(np.mean(sample_d)))
        if sample_a:
            avg_asd.append(float(np.mean(sample_a)))
    report = MetricReport(n_samples=len(preds), n_asd_excluded=sum(excluded.values()))
    for c in classes:
        dm, ds = _mean_std(dices[c])
        am, as_ = _mean_std(asds[c])
        report.per_class[c] = ClassMetrics(dm, ds, am, as_, excluded[c])
    report.dice_avg_mean, report.dice_avg_std = _mean_std(avg_dice)
    report.asd_avg_mean, report.asd_avg_std = _mean_std(avg_asd)
    return report


def format_table(rows: dict[str, MetricReport]) -> str:
    """Plain-text table, one row per method, Dice in percent and ASD in pixels."""
    if not rows:
        return ""
    classes = next(iter(rows.values())).classes
    head = ["Method"] + [f"Dice c{c}" for c in classes] + ["Dice Avg"] + \
        [f"ASD c{c}" for c in classes] + ["ASD Avg"]
    lines = [" | ".join(head)]
    for name, r in rows.items():
        cells = [name]
        cells += [f"{100 * r.per_class[c].dice_mean:.2f}±{100 * r.per_class[c].dice_std:.2f}" for c in classes]
        cells.append(f"{100 * r.dice_avg_mean:.2f}±{100 * r.dice_avg_std:.2f}")
        cells += [f"{r.per_class[c].asd_mean:.2f}±{r.per_class[c].asd_std:.2f}" for c in classes]
        cells.append(f"{r.asd_avg_mean:.2f}±{r.asd_avg_std:.2f}")
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


def evaluate(model, adapter, dataset, batch_size: int = 32) -> MetricReport:
    """Metrics of argmax(model(adapter(x))) against the dataset's masks."""
    from .trainer import predict

    spec = getattr(model, "spec", None)
    k = getattr(spec, "num_classes", dataset.num_classes)
    if k != dataset.num_classes:
        raise ValueError(f"model predicts {k} classes, dataset has {dataset.num_classes}")
    preds = predict(model, dataset.images, adapter, batch_size)
    return report_from_masks(preds, dataset.masks, k)
