"""On-disk phantom datasets.

Layout::

    <root>/manifest.txt
    <root>/<split>/img_<i>.pgm    16-bit intensities, linearly mapped from [lo, hi]
    <root>/<split>/msk_<i>.pgm    8-bit class ids
    <root>/<split>/scr_<i>.pgm    8-bit class ids, 255 = unlabeled
    <root>/<split>/meta_<i>.txt   key=value: seed, index, lo, hi, alpha_0..alpha_m
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import normalize_intensity
from .phantom import PhantomSpec, generate_phantom
from .pgm import read_pgm, write_pgm

SPLITS = ("train", "val", "test")
LEVELS = 65535


@dataclass
class PhantomSet:
    ids: list
    images: np.ndarray  # raw (dequantised) intensities, (N, H, W) float64
    masks: np.ndarray  # (N, H, W) uint8
    scribbles: np.ndarray  # (N, H, W) uint8
    ratios: np.ndarray  # (N, m+1)
    num_classes: int

    def __len__(self) -> int:
        return len(self.ids)

    def normalized(self) -> np.ndarray:
        return np.stack([normalize_intensity(im) for im in self.images]).astype(np.float32)

    def subset(self, idx) -> "PhantomSet":
        idx = list(idx)
        return PhantomSet(
            [self.ids[i] for i in idx], self.images[idx], self.masks[idx],
            self.scribbles[idx], self.ratios[idx], self.num_classes,
        )


def split_indices(n_train: int, n_val: int, n_test: int) -> dict:
    edges = np.cumsum([0, n_train, n_val, n_test])
    return {s: list(range(edges[k], edges[k + 1])) for k, s in enumerate(SPLITS)}


def quantize(image: np.ndarray):
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, np.uint16), lo, hi
    q = np.rint((image - lo) / (hi - lo) * LEVELS).astype(np.uint16)
    return q, lo, hi


def dequantize(q: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + q.astype(np.float64) / LEVELS * (hi - lo)


def spec_to_lines(spec: PhantomSpec) -> list:
    lines = []
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"phantom.{f.name}={v}")
    return lines


def spec_from_meta(meta: dict) -> PhantomSpec:
    kw = {}
    for f in fields(PhantomSpec):
        raw = meta.get(f"phantom.{f.name}")
        if raw is None:
            continue
        default = f.default
        if isinstance(default, tuple):
            kw[f.name] = tuple(float(x) for x in raw.split(","))
        elif isinstance(default, int):
            kw[f.name] = int(raw)
        else:
            kw[f.name] = float(raw)
    return PhantomSpec(**kw)


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def write_dataset(root, spec: PhantomSpec, n_train=40, n_val=10, n_test=15, config_hash: str = "") -> dict:
    root = Path(root)
    splits = split_indices(n_train, n_val, n_test)
    for split, indices in splits.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in indices:
            s = generate_phantom(spec, i)
            q, lo, hi = quantize(s.image)
            write_pgm(d / f"img_{i}.pgm", q, 65535)
            write_pgm(d / f"msk_{i}.pgm", s.mask, 255)
            write_pgm(d / f"scr_{i}.pgm", s.scribble, 255)
            meta = [f"seed={spec.seed}", f"index={i}", f"split={split}", f"lo={lo!r}", f"hi={hi!r}"]
            meta += [f"alpha_{c}={float(a)!r}" for c, a in enumerate(s.ratios)]
            meta.append(f"config_hash={config_hash}")
            (d / f"meta_{i}.txt").write_text("\n".join(meta) + "\n")
    manifest = spec_to_lines(spec)
    manifest += [f"n_{s}={len(v)}" for s, v in splits.items()]
    manifest.append(f"config_hash={config_hash}")
    (root / "manifest.txt").write_text("\n".join(manifest) + "\n")
    return splits


def load_split(root, split: str) -> PhantomSet:
    root = Path(root)
    d = root / split
    if not d.is_dir():
        raise FileNotFoundError(f"dataset split not found: {d}")
    manifest = read_kv(root / "manifest.txt")
    m = int(manifest.get("phantom.num_classes", 3))
    ids = sorted(int(p.stem.split("_")[1]) for p in d.glob("img_*.pgm"))
    if not ids:
        raise FileNotFoundError(f"no images in {d}")
    imgs, msks, scrs, ratios = [], [], [], []
    for i in ids:
        meta = read_kv(d / f"meta_{i}.txt")
        q, _ = read_pgm(d / f"img_{i}.pgm")
        imgs.append(dequantize(q, float(meta["lo"]), float(meta["hi"])))
        msks.append(read_pgm(d / f"msk_{i}.pgm")[0])
        scrs.append(read_pgm(d / f"scr_{i}.pgm")[0])
        ratios.append([float(meta[f"alpha_{c}"]) for c in range(m + 1)])
    return PhantomSet(ids, np.stack(imgs), np.stack(msks), np.stack(scrs), np.array(ratios), m)


def load_manifest_spec(root) -> PhantomSpec:
    return spec_from_meta(read_kv(Path(root) / "manifest.txt"))


def generate_split(spec: PhantomSpec, indices) -> PhantomSet:
    """In-memory equivalent of writing then loading a split (images not quantised)."""
    samples = [generate_phantom(spec, i) for i in indices]
    return PhantomSet(
        [s.index for s in samples],
        np.stack([s.image for s in samples]),
        np.stack([s.mask for s in samples]),
        np.stack([s.scribble for s in samples]),
        np.stack([s.ratios for s in samples]),
        spec.num_classes,
    )


def is_nonempty_dir(path: Optional[os.PathLike]) -> bool:
    return path is not None and Path(path).is_dir() and any(Path(path).iterdir())
