"""Training loop: warm-up, per-epoch mixture re-estimation, Adam updates."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .augment import apply, sample_augmentation, transform_only
from .dataset import PhantomSet
from .losses import FULL, WARMUP, LossParts, LossWeights, global_consistency_loss, negative_loss, supervised_loss, total_loss
from .metrics import dice, keep_largest_component
from .mixture import EmInputs, em_estimate
from .model import Adam, Checkpoint, SegModel
from .partition import partition
from .phantom import UNLABELED

log = logging.getLogger(__name__)

# Table 1 arms: (cutout, negative loss, consistency loss)
ABLATIONS = {
    "l+": (False, False, False),
    "cutout": (True, False, False),
    "l+l-": (False, True, False),
    "cutout+l-": (True, True, False),
    "full": (True, True, True),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 1.0
    lambda2: float = 0.05
    square_size: int = 16
    use_cutout: bool = True
    use_negative: bool = True
    use_consistency: bool = True
    reduction: str = "mean"
    marginal_background: bool = True
    consistency_unmasked: bool = False
    stop_gradient: bool = False
    em_tol: float = 1e-6
    em_max_iters: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid optimisation settings")
        if self.use_consistency and not self.use_cutout:
            raise ValueError("the consistency loss needs cutout augmentation")

    @classmethod
    def for_ablation(cls, name: str, **kw) -> "TrainConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        cut, neg, cons = ABLATIONS[name]
        return cls(use_cutout=cut, use_negative=neg, use_consistency=cons, **kw)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def phase(self, epoch: int) -> str:
        return WARMUP if epoch < self.warmup_epochs else FULL


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    supervised: float
    negative: Optional[float]
    consistency: Optional[float]
    total: float
    seconds: float
    alphas: Optional[np.ndarray] = None
    em_warnings: list = field(default_factory=list)


# ---------------------------------------------------------------- inference helpers


def predict_probs(model: SegModel, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    return np.concatenate([model.predict(images[i : i + chunk]) for i in range(0, len(images), chunk)])


def predict_masks(model: SegModel, images: np.ndarray, postprocess: bool = True) -> np.ndarray:
    masks = predict_probs(model, images).argmax(axis=1).astype(np.uint8)
    if postprocess:
        masks = np.stack([keep_largest_component(m) for m in masks])
    return masks


def mean_foreground_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int):
    per_class = np.array([[dice(p, t, c) for c in range(1, num_classes + 1)] for p, t in zip(pred, truth)])
    return per_class.mean(axis=0), float(per_class.mean())


def estimate_alphas(model: SegModel, images: np.ndarray, scribbles: np.ndarray, cfg: TrainConfig):
    """Per-image EM estimate of unlabeled class proportions with the current (frozen) model."""
    probs = predict_probs(model, images)
    c = probs.shape[1]
    alphas, notes = [], []
    for prob, scr in zip(probs, scribbles):
        unl = scr == UNLABELED
        post = prob[:, unl].T.astype(np.float64)
        post /= post.sum(axis=1, keepdims=True)
        counts = np.bincount(scr[~unl].ravel(), minlength=c)[:c]
        inputs = EmInputs.from_counts(post, counts)
        notes += inputs.warnings
        alphas.append(em_estimate(inputs, cfg.em_tol, cfg.em_max_iters).alpha)
    return np.array(alphas), notes


# ---------------------------------------------------------------- training


def _aug_rng(cfg: TrainConfig, epoch: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, image_id, 0xA06]))


def _augmented_scribble(aug, scribble: np.ndarray) -> np.ndarray:
    cut = np.where(aug.mask > 0, scribble, UNLABELED).astype(np.uint8)
    return transform_only(aug, cut)


def train_step(model, opt, images, scribbles, ids, cfg: TrainConfig, epoch: int, alphas=None):
    """One optimiser update on a batch; returns the :class:`LossReport`."""
    phase = cfg.phase(epoch)
    b = len(images)
    x = images
    scr = scribbles
    augs = []
    if cfg.use_cutout:
        h, w = images.shape[1:]
        augs = [sample_augmentation(h, w, cfg.square_size, _aug_rng(cfg, epoch, i)) for i in ids]
        x = np.concatenate([images, np.stack([apply(a, im) for a, im in zip(augs, images)])])
        scr = np.concatenate([scribbles, np.stack([_augmented_scribble(a, s) for a, s in zip(augs, scribbles)])])
    prob = model.forward(x)
    counts = {"labeled": int((scr != UNLABELED).sum())}
    sup = supervised_loss(prob, scr, reduction=cfg.reduction, skip_empty=True)
    prob_orig = ad.take(prob, slice(0, b)) if cfg.use_cutout else prob
    neg = cons = None
    if cfg.use_negative and phase == FULL:
        parts = [partition(prob.data[k], scribbles[k], alphas[k]) for k in range(b)]
        counts["negative"] = int(sum(len(v) for p in parts for v in p.negatives.values()))
        neg = negative_loss(prob_orig, parts, include_background=cfg.marginal_background, reduction=cfg.reduction)
    if cfg.use_consistency:
        prob_aug = ad.take(prob, slice(b, 2 * b))
        cons = global_consistency_loss(
            prob_orig, prob_aug, augs, masked=not cfg.consistency_unmasked, stop_gradient=cfg.stop_gradient
        )
        counts["consistency"] = int(prob_aug.size)
    loss, report = total_loss(LossParts(sup, neg, cons, counts), cfg.weights, phase)
    if not np.isfinite(report.total):
        raise TrainingError(f"non-finite loss at epoch {epoch}, images {list(ids)}")
    model.zero_grad()
    ad.backward(loss)
    opt.step(model.params)
    if neg is None:
        report.negative = None
    if cons is None:
        report.consistency = None
    return report


def train_epoch(model: SegModel, opt: Adam, data: PhantomSet, cfg: TrainConfig, epoch: int) -> EpochMetrics:
    if len(data) == 0:
        raise ValueError("empty training set")
    start = time.perf_counter()
    phase = cfg.phase(epoch)
    images = data.normalized()
    alphas, notes = None, []
    if cfg.use_negative and phase == FULL:
        alphas, notes = estimate_alphas(model, images, data.scribbles, cfg)
        log.debug("epoch %d alpha mean %s, |alpha - true| mean %s", epoch, alphas.mean(0), np.abs(alphas - data.ratios).mean(0))
    order = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x5EED])).permutation(len(data))
    reports = []
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s : s + cfg.batch_size]
        batch_alphas = alphas[idx] if alphas is not None else None
        try:
            rep = train_step(
                model, opt, images[idx], data.scribbles[idx], [data.ids[i] for i in idx], cfg, epoch, batch_alphas
            )
        except ad.NonFiniteError as exc:
            raise TrainingError(f"epoch {epoch}, batch starting at {s}: {exc}") from exc
        reports.append((len(idx), rep))
    n = sum(k for k, _ in reports)

    def avg(attr):
        vals = [(k, getattr(r, attr)) for k, r in reports]
        if any(v is None for _, v in vals):
            return None
        return float(sum(k * v for k, v in vals) / n)

    return EpochMetrics(
        epoch, phase, avg("supervised"), avg("negative"), avg("consistency"), avg("total"),
        time.perf_counter() - start, alphas, notes,
    )


@dataclass
class FitState:
    model: SegModel
    optimizer: Adam
    next_epoch: int = 0
    best_dice: float = -1.0
    best_state: Optional[dict] = None
    best_epoch: int = -1


HISTORY_FIELDS = ("epoch", "phase", "L+", "L-", "L_global", "total")


def history_row(metrics: EpochMetrics, val_per_class, val_mean) -> dict:
    row = {
        "epoch": metrics.epoch,
        "phase": metrics.phase,
        "L+": metrics.supervised,
        "L-": metrics.negative,
        "L_global": metrics.consistency,
        "total": metrics.total,
    }
    for c, d in enumerate(val_per_class, start=1):
        row[f"val_dice_{c}"] = float(d)
    row["val_mean_dice"] = val_mean
    return row


def fit(
    model: SegModel,
    train_set: PhantomSet,
    val_set: PhantomSet,
    cfg: TrainConfig,
    state: Optional[FitState] = None,
    on_epoch: Optional[Callable[[FitState, dict], None]] = None,
    config_hash: str = "",
):
    """Train for ``cfg.epochs`` and keep the parameters with the best validation Dice.

    Returns ``(best Checkpoint, history rows)``. ``state`` resumes an
    interrupted run; ``on_epoch`` is called after every epoch (for
    checkpointing and history files).
    """
    if set(train_set.ids) & set(val_set.ids):
        raise ValueError("train and validation splits overlap")
    if state is None:
        state = FitState(model, Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps))
    history = []
    val_images = val_set.normalized()
    for epoch in range(state.next_epoch, cfg.epochs):
        metrics = train_epoch(state.model, state.optimizer, train_set, cfg, epoch)
        pred = predict_masks(state.model, val_images, postprocess=True)
        per_class, mean = mean_foreground_dice(pred, val_set.masks, val_set.num_classes)
        row = history_row(metrics, per_class, mean)
        history.append(row)
        state.next_epoch = epoch + 1
        if mean > state.best_dice:
            state.best_dice, state.best_epoch = mean, epoch
            state.best_state = state.model.state()
        log.info(
            "epoch %d [%s] total=%.4f val_dice=%.4f (%.1fs)", epoch, metrics.phase, metrics.total, mean, metrics.seconds
        )
        if on_epoch is not None:
            on_epoch(state, row)
    best = SegModel(state.model.num_classes, hidden=state.model.hidden)
    best.load_state(state.best_state if state.best_state is not None else state.model.state())
    epoch = state.best_epoch if state.best_state is not None else 0
    return Checkpoint(best, epoch, config_hash, extra={"val_mean_dice": repr(state.best_dice)}), history
