"""Training losses on batched probability maps ``(B, m+1, H, W)``.

* partial cross-entropy over scribble pixels,
* negative marginal loss over predicted-negative unlabeled pixels,
* symmetric cosine consistency between ``T(z * f(X))`` and ``f(T(z * X))``,

plus their weighted sum. ``reduction="sum"`` keeps the per-image sums of the
loss definitions; ``"mean"`` divides each image's sum by its number of
contributing terms. Either way the batch value is the mean over images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .augment import CutoutAugmentation, apply, transform_only
from .partition import PartitionResult
from .phantom import UNLABELED

WARMUP, FULL = "warmup", "full"


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.05

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossParts:
    supervised: ad.Tensor
    negative: Optional[ad.Tensor] = None
    consistency: Optional[ad.Tensor] = None
    counts: dict = field(default_factory=dict)


@dataclass
class LossReport:
    supervised: float
    negative: float
    consistency: float
    total: float
    counts: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"L+": self.supervised, "L-": self.negative, "L_global": self.consistency, "total": self.total}


def _per_image_weights(counts: np.ndarray, reduction: str) -> np.ndarray:
    if reduction == "sum":
        return np.ones_like(counts, dtype=np.float64)
    if reduction == "mean":
        return 1.0 / np.maximum(counts, 1)
    raise ValueError(f"unknown reduction {reduction!r}")


def supervised_loss(
    prob: ad.Tensor, scribble: np.ndarray, reduction: str = "sum", skip_empty: bool = False
) -> ad.Tensor:
    """Cross-entropy summed over scribble pixels only (log clamped at 1e-12).

    An image without labeled pixels is an error unless ``skip_empty``, in
    which case it is left out of the batch average.
    """
    scribble = np.asarray(scribble)
    if scribble.ndim == 2:
        scribble = scribble[None]
    b, c = prob.shape[:2]
    labeled = scribble != UNLABELED
    n_l = labeled.reshape(b, -1).sum(axis=1)
    empty = n_l == 0
    if np.any(empty) and (not skip_empty or np.all(empty)):
        raise ValueError(f"images {np.flatnonzero(empty).tolist()} have no labeled pixels")
    w = _per_image_weights(n_l, reduction) / int((~empty).sum())
    target = np.zeros(prob.shape, dtype=prob.dtype)
    bi, yi, xi = np.nonzero(labeled)
    target[bi, scribble[bi, yi, xi], yi, xi] = w[bi]
    return -ad.sum(ad.mul(ad.log(prob), target))


def negative_loss(
    prob: ad.Tensor,
    partitions: Sequence[PartitionResult],
    include_background: bool = False,
    reduction: str = "sum",
) -> ad.Tensor:
    """``-sum_j sum_{i in negatives_j} log(sum_{k != j} p_k(x_i))``.

    By default the fused "other" class only sums the foreground channels
    ``k = 1..m``; ``include_background`` adds channel 0.
    """
    b, c, h, w = prob.shape
    if len(partitions) != b:
        raise ValueError("one partition per image is required")
    first = 0 if include_background else 1
    neg = np.zeros((c, b, h, w), dtype=bool)
    for i, part in enumerate(partitions):
        for j, idx in part.negatives.items():
            neg[j, i].ravel()[idx] = True
    n_terms = np.zeros(b)
    pieces = []
    for j in range(1, c):
        others = [k for k in range(first, c) if k != j]
        if not others:
            warnings.warn(f"class {j}: fused complement is empty (single foreground class); no contribution")
            continue
        if not neg[j].any():
            continue
        n_terms += neg[j].reshape(b, -1).sum(axis=1)
        sel = np.zeros(prob.shape, dtype=prob.dtype)
        sel[:, others] = 1
        marginal = ad.sum(ad.mul(prob, sel), axis=1)  # (B, H, W)
        pieces.append((j, marginal))
    if not pieces:
        warnings.warn("every predicted-negative set is empty; negative loss is 0")
        return ad.Tensor(np.zeros((), dtype=prob.dtype))
    wts = _per_image_weights(n_terms, reduction) / b
    total = None
    for j, marginal in pieces:
        weight = (neg[j] * wts[:, None, None]).astype(prob.dtype)
        term = ad.sum(ad.mul(ad.log(marginal), weight))
        total = term if total is None else ad.add(total, term)
    return -total


def cosine_distance(u: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    """``-(u . v) / (|u| |v|)`` for 1-D tensors."""
    try:
        return -ad.div(ad.dot(u, v), ad.mul(ad.l2norm(u), ad.l2norm(v)))
    except ZeroDivisionError as exc:
        raise ValueError("cosine distance undefined for a zero-norm vector") from exc


def global_consistency_loss(
    prob_orig: ad.Tensor,
    prob_aug: ad.Tensor,
    augs: Sequence[CutoutAugmentation],
    masked: bool = True,
    stop_gradient: bool = False,
) -> ad.Tensor:
    """Symmetric cosine distance between ``T(z * f(X))`` and the prediction on ``T(z * X)``.

    With ``masked`` (default) the augmented prediction is multiplied by
    ``T(z)`` so the cutout area is excluded on both sides. ``stop_gradient``
    treats the original-image branch as a constant target.
    """
    if prob_orig.shape != prob_aug.shape:
        raise ValueError(f"shape mismatch {prob_orig.shape} vs {prob_aug.shape}")
    b = prob_orig.shape[0]
    if isinstance(augs, CutoutAugmentation):
        augs = [augs]
    if len(augs) != b:
        raise ValueError("one augmentation per image is required")
    total = None
    for i, aug in enumerate(augs):
        src = prob_orig[i]
        if stop_gradient:
            src = src.detach()
        a = ad.flatten(apply(aug, src))
        tgt = prob_aug[i]
        if masked:
            zt = transform_only(aug, aug.mask).astype(tgt.dtype)
            tgt = ad.mul(tgt, np.broadcast_to(zt, tgt.shape).copy())
        bvec = ad.flatten(tgt)
        term = ad.add(ad.mul(cosine_distance(a, bvec), 0.5), ad.mul(cosine_distance(bvec, a), 0.5))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / b)


def total_loss(parts: LossParts, weights: LossWeights, phase: str):
    """Weighted objective; the warm-up phase leaves the negative loss out entirely."""
    if phase not in (WARMUP, FULL):
        raise ValueError(f"phase must be {WARMUP!r} or {FULL!r}, got {phase!r}")
    total = parts.supervised
    if phase == FULL and parts.negative is not None and weights.lambda1 != 0:
        total = ad.add(total, ad.mul(parts.negative, weights.lambda1))
    if parts.consistency is not None and weights.lambda2 != 0:
        total = ad.add(total, ad.mul(parts.consistency, weights.lambda2))
    report = LossReport(
        supervised=parts.supervised.item(),
        negative=parts.negative.item() if parts.negative is not None else 0.0,
        consistency=parts.consistency.item() if parts.consistency is not None else 0.0,
        total=total.item(),
        counts=dict(parts.counts),
    )
    return total, report
