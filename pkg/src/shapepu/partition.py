"""Rank unlabeled pixels per foreground class into predicted positives/negatives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantom import UNLABELED


@dataclass
class PartitionResult:
    unlabeled: np.ndarray  # flat row-major indices of unlabeled pixels
    positives: dict  # class j -> flat indices in the top alpha_j share
    negatives: dict  # class j -> the remaining unlabeled indices

    def counts(self) -> dict:
        return {j: len(v) for j, v in self.positives.items()}

    def negative_mask(self, j: int, shape) -> np.ndarray:
        m = np.zeros(int(np.prod(shape)), dtype=bool)
        m[self.negatives[j]] = True
        return m.reshape(shape)


def partition(probmap: np.ndarray, scribble: np.ndarray, alpha) -> PartitionResult:
    """Split unlabeled pixels for each foreground class by descending ``p(c_j | x)``.

    ``probmap`` is ``(m+1, H, W)``. The top ``round(alpha_j * n_u)`` pixels form
    the positive set; ties keep row-major order. Background gets no split.
    """
    probmap = np.asarray(probmap)
    alpha = np.asarray(alpha, dtype=np.float64)
    unl = np.flatnonzero(np.asarray(scribble).ravel() == UNLABELED)
    n_u = unl.size
    if n_u == 0:
        raise ValueError("no unlabeled pixels to partition")
    flat = probmap.reshape(probmap.shape[0], -1)
    positives, negatives = {}, {}
    for j in range(1, probmap.shape[0]):
        k = int(round(alpha[j] * n_u))
        # stable sort on -p keeps ascending pixel index among ties
        order = unl[np.argsort(-flat[j, unl], kind="stable")]
        positives[j] = order[:k]
        negatives[j] = np.sort(order[k:])
    return PartitionResult(unl, positives, negatives)
