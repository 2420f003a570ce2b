"""Confusion matrix, per-class IoU and mean IoU."""

from __future__ import annotations

import numpy as np

from kprnet.kitti_io import IGNORE, NUM_CLASSES


class ConfusionMatrix:
    """``counts[g, p]`` = points with ground truth ``g`` predicted as ``p``.

    Labeled points predicted as ``IGNORE`` are kept in ``missed[g]``: they are
    false negatives for ``g`` and false positives for no class.
    """

    def __init__(self, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.missed = np.zeros(num_classes, dtype=np.int64)

    @classmethod
    def from_counts(cls, counts, missed=None) -> "ConfusionMatrix":
        counts = np.asarray(counts, dtype=np.int64)
        cm = cls(counts.shape[0])
        if counts.shape != (cm.num_classes, cm.num_classes) or (counts < 0).any():
            raise ValueError("counts must be a square non-negative matrix")
        cm.counts[...] = counts
        if missed is not None:
            cm.missed[...] = np.asarray(missed, dtype=np.int64)
        return cm

    def update(self, preds, gts) -> "ConfusionMatrix":
        preds = np.asarray(preds).astype(np.int64).ravel()
        gts = np.asarray(gts).astype(np.int64).ravel()
        if preds.shape != gts.shape:
            raise ValueError(f"{preds.size} predictions for {gts.size} labels")
        labeled = gts != IGNORE
        if ((gts[labeled] < 0) | (gts[labeled] >= self.num_classes)).any():
            raise ValueError("ground-truth id out of range")
        p, g = preds[labeled], gts[labeled]
        hit = (p >= 0) & (p < self.num_classes)
        c = self.num_classes
        self.counts += np.bincount(g[hit] * c + p[hit], minlength=c * c).reshape(c, c)
        self.missed += np.bincount(g[~hit], minlength=c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.missed = self.missed + other.missed
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.missed.sum())

    def components(self):
        tp = np.diag(self.counts)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp + self.missed
        return tp, fp, fn

    def iou(self) -> np.ndarray:
        """Per-class IoU; ``nan`` where the class never occurs in labels or predictions."""
        tp, fp, fn = self.components()
        union = tp + fp + fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / np.maximum(union, 1), np.nan)

    def miou(self) -> float:
        """Mean over defined classes; ``nan`` when no class is defined."""
        values = self.iou()
        defined = ~np.isnan(values)
        if not defined.any():
            return float("nan")
        return float(values[defined].mean())


def iou(cm: ConfusionMatrix) -> np.ndarray:
    return cm.iou()


def miou(cm: ConfusionMatrix) -> float:
    return cm.miou()


def format_table(cm: ConfusionMatrix, names: list[str]) -> str:
    """Aligned text table of per-class IoU (percent) and the mean."""
    values = cm.iou()
    width = max(len(n) for n in list(names) + ["mean-IoU"])
    lines = [f"{'class':<{width}}  IoU"]
    for name, v in zip(names, values):
        lines.append(f"{name:<{width}}  {'-' if np.isnan(v) else f'{100 * v:5.1f}'}")
    m = cm.miou()
    lines.append(f"{'mean-IoU':<{width}}  {'-' if np.isnan(m) else f'{100 * m:5.1f}'}")
    return "\n".join(lines)


def table_rows(cm: ConfusionMatrix, names: list[str]) -> list[tuple[str, str]]:
    """``(class, iou)`` rows for CSV output; undefined classes are empty strings."""
    rows = [(name, "" if np.isnan(v) else repr(float(v))) for name, v in zip(names, cm.iou())]
    m = cm.miou()
    rows.append(("mean-IoU", "" if np.isnan(m) else repr(m)))
    return rows
