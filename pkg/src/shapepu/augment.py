"""Cutout masks, dihedral transforms and intensity normalisation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

# (quarter turns, flip) for the 8 symmetries of the square
DIHEDRAL = tuple((k, f) for f in (False, True) for k in range(4))


@dataclass(frozen=True)
class CutoutAugmentation:
    """Binary cutout mask ``z`` (0 inside the square) followed by a dihedral transform."""

    height: int
    width: int
    size: int
    top: int
    left: int
    turns: int = 0
    flip: bool = False

    @property
    def mask(self) -> np.ndarray:
        z = np.ones((self.height, self.width), dtype=np.float32)
        z[self.top : self.top + self.size, self.left : self.left + self.size] = 0
        return z

    @property
    def transform(self) -> tuple:
        return (self.turns, self.flip)

    def inverse(self) -> tuple:
        """(turns, flip) of the inverse transform."""
        return compose((0, False), invert(self.transform))

    def apply(self, x):
        return apply(self, x)


def sample_augmentation(height: int, width: int, square_size: int, rng: np.random.Generator) -> CutoutAugmentation:
    if square_size < 0 or square_size > min(height, width):
        raise ValueError(f"cutout of {square_size} px does not fit a {height}x{width} image")
    top = int(rng.integers(0, height - square_size + 1))
    left = int(rng.integers(0, width - square_size + 1))
    turns, flip = DIHEDRAL[int(rng.integers(0, 8))]
    if height != width and turns % 2:
        turns = (turns + 1) % 4  # odd turns would change a non-square shape
    return CutoutAugmentation(height, width, square_size, top, left, turns, flip)


def _check(aug: CutoutAugmentation, shape) -> None:
    if tuple(shape[-2:]) != (aug.height, aug.width):
        raise ValueError(f"spatial dims {tuple(shape[-2:])} do not match cutout mask {(aug.height, aug.width)}")


def apply(aug: CutoutAugmentation, x):
    """``T(z * x)`` for an array or graph tensor whose trailing axes are (H, W)."""
    _check(aug, x.shape)
    if isinstance(x, ad.Tensor):
        z = np.broadcast_to(aug.mask, x.shape).astype(x.dtype)
        return ad.dihedral(ad.mul(x, z), aug.turns, aug.flip)
    x = np.asarray(x)
    return ad.dihedral_array(x * aug.mask.astype(x.dtype), aug.turns, aug.flip)


def transform_only(aug: CutoutAugmentation, x):
    """``T(x)`` without masking; used to carry ``z`` itself into the transformed frame."""
    _check(aug, x.shape)
    if isinstance(x, ad.Tensor):
        return ad.dihedral(x, aug.turns, aug.flip)
    return ad.dihedral_array(np.asarray(x), aug.turns, aug.flip)


def compose(first: tuple, second: tuple) -> tuple:
    """Dihedral element equal to applying ``first`` then ``second`` (found by action on a probe)."""
    probe = np.arange(9).reshape(3, 3)
    target = ad.dihedral_array(ad.dihedral_array(probe, *first), *second)
    for k, f in DIHEDRAL:
        if np.array_equal(ad.dihedral_array(probe, k, f), target):
            return (k, f)
    raise AssertionError("dihedral group not closed")  # pragma: no cover


def invert(t: tuple) -> tuple:
    for cand in DIHEDRAL:
        if compose(t, cand) == (0, False):
            return cand
    raise AssertionError("no inverse")  # pragma: no cover


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit population variance per image; constant images map to zeros."""
    img = np.asarray(image, dtype=np.float64)
    sd = img.std()
    if not sd > 0:
        log.warning("constant image cannot be normalised; returning zeros")
        return np.zeros_like(img)
    return (img - img.mean()) / sd
