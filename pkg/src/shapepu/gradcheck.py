"""Central finite-difference checks for every differentiable op and loss.

All checks run in float64 with step ``h = 1e-3``. The error of one gradient
tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)``;
a check passes when the worst tensor over all seeds stays below ``1e-4``.
Scaling by the tensor's largest entry keeps near-zero elements from being
judged on the O(h^2) truncation error alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .augment import sample_augmentation
from .losses import global_consistency_loss, negative_loss, supervised_loss
from .partition import partition
from .phantom import UNLABELED

STEP = 1e-3
TOLERANCE = 1e-4
FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    worst: float
    seeds: int

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if not analytic.size:
        return 0.0
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), FLOOR)
    return float(np.abs(analytic - numeric).max() / denom)


def numeric_grad(fn: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to array ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_graph(build: Callable[[list], ad.Tensor], arrays: list, scale: float = 1.0) -> float:
    """Worst relative error over all inputs of ``build(leaves) -> scalar``.

    ``scale`` multiplies the analytic gradient and exists only so the harness
    can be shown to catch a wrong gradient.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(build(leaves))
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        def value():
            return build([ad.Tensor(a) for a in arrays]).item()

        num = numeric_grad(value, arr)
        worst = max(worst, relative_error(leaf.grad * scale, num))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _random_scribble(rng, b, h, w, c):
    scr = np.full((b, h, w), UNLABELED, dtype=np.uint8)
    for i in range(b):
        picks = rng.choice(h * w, size=max(2, h * w // 6), replace=False)
        scr[i].ravel()[picks] = rng.integers(0, c, size=picks.size)
    return scr


def _cases(rng) -> dict:
    """name -> (builder, input arrays); one fresh draw per seed."""
    cases = {}

    x = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    cases["conv2d"] = (lambda t: ad.sum(ad.mul(ad.conv2d(*t), _W(rng, (1, 3, 5, 5), "conv"))), [x, k, bias])
    x1 = rng.standard_normal((2, 3, 4, 4))
    k1 = rng.standard_normal((2, 3, 1, 1))
    cases["conv2d_1x1"] = (lambda t: ad.sum(ad.mul(ad.conv2d(t[0], t[1]), _W(rng, (2, 2, 4, 4), "conv1"))), [x1, k1])
    cases["relu"] = (lambda t: ad.sum(ad.mul(ad.relu(t[0]), _W(rng, (3, 4), "relu"))), [_away_from_zero(rng, (3, 4))])
    cases["softmax"] = (
        lambda t: ad.sum(ad.mul(ad.softmax_channels(t[0]), _W(rng, (2, 4, 3, 3), "sm"))),
        [rng.standard_normal((2, 4, 3, 3))],
    )
    a, b2 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    cases["add"] = (lambda t: ad.sum(ad.mul(ad.add(*t), _W(rng, (3, 4), "add"))), [a, b2])
    cases["mul"] = (lambda t: ad.sum(ad.mul(*t)), [a.copy(), b2.copy()])
    cases["div"] = (lambda t: ad.sum(ad.div(t[0], t[1])), [a.copy(), 1.5 + rng.random((3, 4))])
    cases["log"] = (lambda t: ad.sum(ad.mul(ad.log(t[0]), _W(rng, (5,), "log"))), [0.2 + rng.random(5)])
    cases["sum_axis"] = (
        lambda t: ad.sum(ad.mul(ad.sum(t[0], axis=1), _W(rng, (2, 3, 3), "sax"))),
        [rng.standard_normal((2, 4, 3, 3))],
    )
    cases["mean"] = (lambda t: ad.mean(ad.mul(t[0], t[0])), [rng.standard_normal((4, 3))])
    u, v = rng.standard_normal(6), rng.standard_normal(6)
    cases["dot"] = (lambda t: ad.dot(*t), [u, v])
    cases["l2norm"] = (lambda t: ad.l2norm(t[0]), [u.copy()])
    cases["reshape_take"] = (
        lambda t: ad.sum(ad.mul(ad.flatten(t[0][1]), _W(rng, (12,), "take"))),
        [rng.standard_normal((2, 3, 4))],
    )
    turns, flip = int(rng.integers(4)), bool(rng.integers(2))
    cases["dihedral"] = (
        lambda t: ad.sum(ad.mul(ad.dihedral(t[0], turns, flip), _W(rng, (2, 4, 4), "dih"))),
        [rng.standard_normal((2, 4, 4))],
    )

    # losses, differentiated with respect to logits through the softmax
    c, h, w = 4, 8, 8
    logits = rng.standard_normal((1, c, h, w))
    scr = _random_scribble(rng, 1, h, w, c)
    for red in ("sum", "mean"):
        cases[f"supervised_{red}"] = (
            lambda t, red=red: supervised_loss(ad.softmax_channels(t[0]), scr, reduction=red),
            [logits.copy()],
        )
    probs = ad.softmax_channels(ad.Tensor(logits)).data
    alpha = rng.dirichlet(np.ones(c))
    part = partition(probs[0], scr[0], alpha)
    for bg in (False, True):
        cases[f"negative_bg{int(bg)}"] = (
            lambda t, bg=bg: negative_loss(ad.softmax_channels(t[0]), [part], include_background=bg),
            [logits.copy()],
        )
    aug = sample_augmentation(h, w, 3, rng)
    logits_aug = rng.standard_normal((1, c, h, w))
    for masked in (True, False):
        cases[f"consistency_masked{int(masked)}"] = (
            lambda t, masked=masked: global_consistency_loss(
                ad.softmax_channels(t[0]), ad.softmax_channels(t[1]), [aug], masked=masked
            ),
            [logits.copy(), logits_aug],
        )

    # composite conv -> relu -> conv -> softmax -> cross-entropy
    while True:
        cx = rng.standard_normal((1, 1, 6, 6))
        ck1 = rng.standard_normal((3, 1, 3, 3))
        pre = ad.conv2d(ad.Tensor(cx), ad.Tensor(ck1)).data
        if np.min(np.abs(pre)) > 10 * STEP:
            break
    ck2 = rng.standard_normal((c, 3, 1, 1))
    scr_c = _random_scribble(rng, 1, 6, 6, c)
    cases["composite"] = (
        lambda t: supervised_loss(ad.softmax_channels(ad.conv2d(ad.relu(ad.conv2d(t[0], t[1])), t[2])), scr_c),
        [cx, ck1, ck2],
    )
    return cases


_WEIGHTS: dict = {}


def _W(rng, shape, key):
    """Fixed random projection so each check exercises a non-trivial upstream gradient."""
    if key not in _WEIGHTS or _WEIGHTS[key].shape != shape:
        _WEIGHTS[key] = rng.standard_normal(shape)
    return _WEIGHTS[key]


def run_suite(seeds: int = 20, base_seed: int = 0, corrupt: Optional[str] = None, only=None) -> list:
    """Run every check for ``seeds`` random draws and return the worst error per check."""
    worst: dict = {}
    for s in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([base_seed, s]))
        _WEIGHTS.clear()
        for name, (build, arrays) in _cases(rng).items():
            if only is not None and name not in only:
                continue
            err = check_graph(build, arrays, scale=1.01 if name == corrupt else 1.0)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(n, e, seeds) for n, e in worst.items()]
