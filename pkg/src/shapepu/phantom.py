"""Synthetic cardiac-like phantoms with full masks and scribble annotations.

Class ids: 0 background, 1 "LV" (disk), 2 "MYO" (annulus around the disk),
3 "RV" (crescent hugging the annulus). With ``num_classes < 3`` the later
structures are dropped.

Intensities are ``class_mean + bias_field + class_sigma * N(0, 1)`` where the
bias field is a smooth bilinear surface bounded by ``bias_amplitude``. All
randomness is derived from ``(seed, index)`` so a sample can be regenerated
exactly, which is what the oracle posteriors rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize

UNLABELED = 255
# geometry lengths are given for this frame size and scale linearly with ``size``
REFERENCE_SIZE = 96
CLASS_NAMES = ("BG", "LV", "MYO", "RV")


class PhantomError(ValueError):
    """The phantom specification cannot be realised."""


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 96
    num_classes: int = 3
    means: tuple = (0.45, 1.00, 0.10, 0.80)
    sigmas: tuple = (0.08, 0.20, 0.20, 0.20)
    bias_amplitude: float = 0.15
    texture_scale: float = 3.0
    texture_share: float = 0.0
    lv_radius: tuple = (8.0, 12.0)
    myo_thickness: tuple = (6.0, 9.0)
    rv_extra: tuple = (4.0, 6.0)
    rv_shift: tuple = (1.2, 1.6)
    border: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= 3:
            raise PhantomError(f"num_classes must be 1..3, got {self.num_classes}")
        if len(self.means) < self.num_classes + 1 or len(self.sigmas) < self.num_classes + 1:
            raise PhantomError("need one intensity mean and sigma per class")
        if min(self.sigmas[: self.num_classes + 1]) < 0 or self.bias_amplitude < 0:
            raise PhantomError("noise sigma and bias amplitude must be nonnegative")
        if self.max_extent() + self.border + 1 > self.size / 2:
            raise PhantomError(
                f"structures of radius up to {self.max_extent():.1f} px do not fit a "
                f"{self.size}x{self.size} frame with a {self.border}px border"
            )

    @property
    def scale(self) -> float:
        return self.size / REFERENCE_SIZE

    def max_extent(self) -> float:
        """Largest possible distance (px) of any foreground pixel from the LV centre."""
        r_myo = self.lv_radius[1] + (self.myo_thickness[1] if self.num_classes >= 2 else 0)
        if self.num_classes < 3:
            return r_myo * self.scale
        return (r_myo + self.rv_extra[1] * (1 + self.rv_shift[1])) * self.scale


@dataclass(frozen=True)
class Geometry:
    center: tuple
    lv_radius: float
    myo_radius: float
    rv_center: tuple
    rv_radius: float
    bias_coeffs: tuple


@dataclass
class Sample:
    index: int
    image: np.ndarray  # float64 (H, W)
    mask: np.ndarray  # uint8 (H, W), 0..m
    scribble: np.ndarray  # uint8 (H, W), 0..m or UNLABELED
    ratios: np.ndarray  # true class frequencies over unlabeled pixels
    geometry: Optional[Geometry] = None
    warnings: list = field(default_factory=list)


def _sample_rng(spec: PhantomSpec, index: int, stream: int) -> np.random.Generator:
    if index < 0:
        raise PhantomError(f"index must be >= 0, got {index}")
    return np.random.default_rng(np.random.SeedSequence([spec.seed, index, stream]))


def sample_geometry(spec: PhantomSpec, index: int) -> Geometry:
    rng = _sample_rng(spec, index, 0)
    s = spec.scale
    r_lv = s * rng.uniform(*spec.lv_radius)
    r_myo = r_lv + (s * rng.uniform(*spec.myo_thickness) if spec.num_classes >= 2 else 0.0)
    theta = rng.uniform(0, 2 * math.pi)
    extra = s * rng.uniform(*spec.rv_extra)
    # shift > extra keeps the crescent from wrapping all the way round
    shift = rng.uniform(*spec.rv_shift) * extra
    rv_radius = r_myo + extra
    if spec.num_classes >= 3:
        extent = max(r_myo, shift + rv_radius)
    else:
        extent = r_myo
    lo = spec.border + 1 + extent
    hi = spec.size - 1 - spec.border - 1 - extent
    if hi < lo:
        raise PhantomError("structures do not fit inside the frame")
    cy, cx = rng.uniform(lo, hi), rng.uniform(lo, hi)
    rv_c = (cy + shift * math.sin(theta), cx + shift * math.cos(theta))
    bias = tuple(rng.uniform(-1, 1, size=3))
    return Geometry((cy, cx), r_lv, r_myo, rv_c, rv_radius, bias)


def rasterize(spec: PhantomSpec, geo: Geometry) -> np.ndarray:
    """Class-id mask sampled at pixel centres."""
    yy, xx = np.mgrid[0 : spec.size, 0 : spec.size].astype(np.float64)
    d = np.hypot(yy - geo.center[0], xx - geo.center[1])
    mask = np.zeros((spec.size, spec.size), dtype=np.uint8)
    if spec.num_classes >= 3:
        d_rv = np.hypot(yy - geo.rv_center[0], xx - geo.rv_center[1])
        mask[(d_rv <= geo.rv_radius) & (d > geo.myo_radius)] = 3
    if spec.num_classes >= 2:
        mask[(d <= geo.myo_radius) & (d > geo.lv_radius)] = 2
    mask[d <= geo.lv_radius] = 1
    return mask


def bias_field(spec: PhantomSpec, geo: Geometry) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, spec.size)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    a, b, c = geo.bias_coeffs
    norm = abs(a) + abs(b) + abs(c)
    if norm == 0 or spec.bias_amplitude == 0:
        return np.zeros((spec.size, spec.size))
    return spec.bias_amplitude * (a * yy + b * xx + c * yy * xx) / norm


def class_means_map(spec: PhantomSpec, mask: np.ndarray) -> np.ndarray:
    return np.asarray(spec.means, dtype=np.float64)[mask]


def class_sigma_map(spec: PhantomSpec, mask: np.ndarray) -> np.ndarray:
    return np.asarray(spec.sigmas, dtype=np.float64)[mask]


def background_texture(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Stationary unit-variance Gaussian field: smooth blobs plus white noise.

    ``texture_share`` is the fraction of the variance carried by the smooth
    component, so every pixel stays marginally N(0, 1).
    """
    white = rng.standard_normal((spec.size, spec.size))
    if spec.texture_scale <= 0 or spec.texture_share <= 0:
        return white
    smooth = ndimage.gaussian_filter(rng.standard_normal((spec.size, spec.size)), spec.texture_scale, mode="wrap")
    impulse = np.zeros((spec.size, spec.size))
    impulse[0, 0] = 1.0
    kernel = ndimage.gaussian_filter(impulse, spec.texture_scale, mode="wrap")
    smooth /= math.sqrt(float(np.sum(kernel**2)))
    return math.sqrt(spec.texture_share) * smooth + math.sqrt(1.0 - spec.texture_share) * white


def generate_phantom(spec: PhantomSpec, index: int) -> Sample:
    """Deterministic sample ``index`` of the phantom family ``spec``."""
    geo = sample_geometry(spec, index)
    mask = rasterize(spec, geo)
    rng = _sample_rng(spec, index, 1)
    noise = rng.standard_normal(mask.shape)
    noise = np.where(mask == 0, background_texture(spec, rng), noise)
    image = class_means_map(spec, mask) + bias_field(spec, geo) + class_sigma_map(spec, mask) * noise
    warnings: list = []
    scribble = draw_scribbles(mask, _sample_rng(spec, index, 2), border=spec.border, warnings=warnings)
    ratios = unlabeled_ratios(mask, scribble, spec.num_classes)
    return Sample(index, image, mask, scribble, ratios, geo, warnings)


# ---------------------------------------------------------------- scribbles

_NEIGHBOURS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius**2


def _walk(allowed: np.ndarray, start: tuple, target: int, rng: np.random.Generator) -> list:
    """Self-avoiding, 1-pixel-wide 8-connected walk inside ``allowed``.

    A depth-first search over walks: at every step the candidate moves are
    put in a random order biased towards keeping the current heading, and a
    dead end backs up to the previous pixel's next candidate. The search
    stops at ``target`` pixels or after a step budget; the longest walk seen
    is returned.
    """
    h, w = allowed.shape
    path = [start]
    on_path = {start}

    def candidates():
        y, x = path[-1]
        heading = (y - path[-2][0], x - path[-2][1]) if len(path) > 1 else None
        recent = set(path[-2:])
        found, scores = [], []
        for dy, dx in _NEIGHBOURS:
            ny, nx = y + dy, x + dx
            if not (0 <= ny < h and 0 <= nx < w) or not allowed[ny, nx] or (ny, nx) in on_path:
                continue
            # stay 1 px wide: the new pixel may touch only the last two path pixels
            if any((ny + qy, nx + qx) in on_path and (ny + qy, nx + qx) not in recent for qy, qx in _NEIGHBOURS):
                continue
            found.append((ny, nx))
            scores.append(1.0 if heading is None else 1.0 + 4.0 * max(0.0, dy * heading[0] + dx * heading[1]))
        if not found:
            return []
        p = np.array(scores) / sum(scores)
        return [found[k] for k in rng.choice(len(found), size=len(found), replace=False, p=p)]

    stack = [candidates()]
    best = list(path)
    budget = 50 * target
    while len(path) < target and budget > 0:
        budget -= 1
        if not stack[-1]:
            stack.pop()
            on_path.discard(path.pop())
            if not path:
                break
            continue
        nxt = stack[-1].pop(0)
        path.append(nxt)
        on_path.add(nxt)
        stack.append(candidates())
        if len(path) > len(best):
            best = list(path)
    return best


def _scribble_for_region(region: np.ndarray, rng: np.random.Generator, tries: int = 12) -> list:
    eroded = ndimage.binary_erosion(region, structure=_disk(2), border_value=0)
    if not eroded.any():
        dist = ndimage.distance_transform_edt(np.pad(region, 1))[1:-1, 1:-1]
        y, x = np.unravel_index(np.argmax(dist), dist.shape)
        return [(int(y), int(x))]
    skel = skeletonize(eroded)
    skel_len = max(int(skel.sum()), math.sqrt(4.0 * eroded.sum() / math.pi))
    lo = max(1, math.ceil(0.2 * skel_len))
    hi = max(lo, math.floor(0.6 * skel_len))
    target = int(rng.integers(lo, hi + 1))
    # roam the whole eroded region so labels are not tied to the medial curve
    candidates = np.argwhere(eroded)
    best: list = []
    for _ in range(tries):
        y, x = candidates[rng.integers(len(candidates))]
        path = _walk(eroded, (int(y), int(x)), target, rng)
        if len(path) > len(best):
            best = path
        if len(best) >= lo:
            break
    return best


def draw_scribbles(
    full_mask: np.ndarray,
    rng: np.random.Generator,
    border: int = 8,
    warnings: Optional[list] = None,
) -> np.ndarray:
    """One thin curve per present class inside its region eroded by radius 2.

    The background curve is confined to the band within ``border`` pixels of
    the image edge. Everything else is ``UNLABELED``.
    """
    h, w = full_mask.shape
    scribble = np.full(full_mask.shape, UNLABELED, dtype=np.uint8)
    band = np.zeros(full_mask.shape, dtype=bool)
    band[:border, :] = band[-border:, :] = True
    band[:, :border] = band[:, -border:] = True
    for cls in np.unique(full_mask):
        region = full_mask == cls
        if cls == 0 and (region & band).any():
            region = region & band
        path = _scribble_for_region(region, rng)
        if len(path) == 1 and warnings is not None:
            warnings.append(f"class {int(cls)}: region too small, single-pixel scribble")
        ys, xs = zip(*path)
        scribble[list(ys), list(xs)] = cls
    return scribble


def unlabeled_ratios(mask: np.ndarray, scribble: np.ndarray, num_classes: int) -> np.ndarray:
    unl = scribble == UNLABELED
    n_u = int(unl.sum())
    if n_u == 0:
        raise ValueError("no unlabeled pixels")
    counts = np.bincount(mask[unl].ravel(), minlength=num_classes + 1)[: num_classes + 1]
    return counts / n_u


def true_unlabeled_ratios(sample: Sample, num_classes: Optional[int] = None) -> np.ndarray:
    """Exact class frequencies of the full mask over the unlabeled pixels."""
    m = int(sample.mask.max()) if num_classes is None else num_classes
    return unlabeled_ratios(sample.mask, sample.scribble, m)


# ---------------------------------------------------------------- oracle


def expected_class_fractions(spec: PhantomSpec, n_points: int = 400_000, seed: int = 12345) -> np.ndarray:
    """Expected per-class area fractions implied by the geometry ranges.

    LV and MYO areas follow in closed form from the uniform radius draws;
    the crescent is integrated by Monte Carlo on the continuous geometry
    (independent of the rasteriser). Fractions do not depend on ``size``
    because the geometry scales with the frame.
    """
    a, b = spec.lv_radius
    e_r2 = (a * a + a * b + b * b) / 3.0
    t0, t1 = spec.myo_thickness
    e_t = (t0 + t1) / 2.0
    e_t2 = (t0 * t0 + t0 * t1 + t1 * t1) / 3.0
    e_r = (a + b) / 2.0
    total = float(REFERENCE_SIZE**2)
    frac = np.zeros(spec.num_classes + 1)
    frac[1] = math.pi * e_r2 / total
    if spec.num_classes >= 2:
        frac[2] = math.pi * (2 * e_r * e_t + e_t2) / total
    if spec.num_classes >= 3:
        rng = np.random.default_rng(seed)
        r_lv = rng.uniform(a, b, n_points)
        r_myo = r_lv + rng.uniform(t0, t1, n_points)
        extra = rng.uniform(*spec.rv_extra, n_points)
        shift = rng.uniform(*spec.rv_shift, n_points) * extra
        rv_r = r_myo + extra
        box = shift + rv_r
        py = rng.uniform(-1, 1, n_points) * box
        px = rng.uniform(-1, 1, n_points) * box
        inside = (np.hypot(py, px - shift) <= rv_r) & (np.hypot(py, px) > r_myo)
        frac[3] = float(np.mean(inside * (2 * box) ** 2)) / total
    frac[0] = 1.0 - frac[1:].sum()
    return frac


def oracle_posteriors(spec: PhantomSpec, index: int, image: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Exact Bayes posteriors p(c | intensity, position) under class prior ``prior``.

    Uses the generator's Gaussian class-conditionals with the sample's own
    bias field. Returns an (H, W, m+1) array.
    """
    geo = sample_geometry(spec, index)
    mu = np.asarray(spec.means[: spec.num_classes + 1])[None, None, :] + bias_field(spec, geo)[..., None]
    sd = np.asarray(spec.sigmas[: spec.num_classes + 1])[None, None, :]
    logp = -0.5 * ((image[..., None] - mu) / sd) ** 2 - np.log(sd) + np.log(np.maximum(prior, 1e-300))
    logp -= logp.max(axis=-1, keepdims=True)
    p = np.exp(logp)
    return p / p.sum(axis=-1, keepdims=True)
