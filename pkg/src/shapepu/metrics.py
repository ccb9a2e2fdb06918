"""Dice, Hausdorff distance and largest-component post-processing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT = np.ones((3, 3), dtype=bool)


def dice(pred_mask, true_mask, class_id: int) -> float:
    a = np.asarray(pred_mask) == class_id
    b = np.asarray(true_mask) == class_id
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def hausdorff(pred_mask, true_mask, class_id: int) -> float:
    """Symmetric Hausdorff distance in pixels; ``nan`` when either set is empty."""
    a = np.asarray(pred_mask) == class_id
    b = np.asarray(true_mask) == class_id
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return math.nan
    to_b = ndimage.distance_transform_edt(~b)
    to_a = ndimage.distance_transform_edt(~a)
    return float(max(to_b[a].max(), to_a[b].max()))


def keep_largest_component(pred_mask) -> np.ndarray:
    """Per foreground class keep only the largest 8-connected component.

    Ties go to the component whose first pixel comes first in row-major
    order. Dropped pixels become background.
    """
    pred = np.array(pred_mask, copy=True)
    for cls in np.unique(pred):
        if cls == 0:
            continue
        labels, n = ndimage.label(pred == cls, structure=EIGHT)
        if n <= 1:
            continue
        sizes = np.bincount(labels.ravel())[1:]
        # scipy numbers components in row-major order of first pixel, so argmax breaks ties correctly
        keep = int(np.argmax(sizes)) + 1
        pred[(labels > 0) & (labels != keep)] = 0
    return pred


@dataclass
class EvalResult:
    dice: dict
    hausdorff: dict

    @property
    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    @property
    def mean_hausdorff(self) -> float:
        vals = [v for v in self.hausdorff.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan


def evaluate(pred_mask, true_mask, num_classes: int) -> EvalResult:
    """Foreground per-class Dice and Hausdorff."""
    classes = range(1, num_classes + 1)
    return EvalResult(
        {c: dice(pred_mask, true_mask, c) for c in classes},
        {c: hausdorff(pred_mask, true_mask, c) for c in classes},
    )
