"""Compact fully-convolutional segmentation model, Adam and checkpoint files.

Checkpoint layout (all text is UTF-8, one ``key=value`` per line)::

    SHAPEPU-CHECKPOINT 1
    topology=conv3x3(1->16)+relu,conv3x3(16->32)+relu,conv3x3(32->16)+relu,conv1x1(16->4),softmax
    num_classes=3
    epoch=17
    config_hash=...
    tensor=conv1.weight;16,1,3,3
    ...
    END
    <raw float32 little-endian blocks, one per ``tensor=`` line, in order>

Extra ``tensor=`` lines named ``adam.m.*`` / ``adam.v.*`` plus an
``adam_step`` key carry optimiser state for resuming.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad

MAGIC = "SHAPEPU-CHECKPOINT 1"
HIDDEN = (16, 32, 16)


class ModelError(RuntimeError):
    pass


class SegModel:
    """conv3x3(1->16), conv3x3(16->32), conv3x3(32->16) with ReLU, conv1x1 -> m+1, softmax."""

    def __init__(self, num_classes: int = 3, seed: int = 0, hidden=HIDDEN):
        self.num_classes = num_classes
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        chans = (1, *self.hidden, num_classes + 1)
        self.params: dict = {}
        for i in range(len(chans) - 1):
            k = 1 if i == len(chans) - 2 else 3
            fan_in = chans[i] * k * k
            w = rng.standard_normal((chans[i + 1], chans[i], k, k)) * np.sqrt(2.0 / fan_in)
            if i == len(chans) - 2:
                w *= 0.1  # start the classifier close to uniform
            self.params[f"conv{i + 1}.weight"] = ad.Tensor(w.astype(np.float32), requires_grad=True)
            self.params[f"conv{i + 1}.bias"] = ad.Tensor(np.zeros(chans[i + 1], np.float32), requires_grad=True)

    @property
    def layers(self) -> int:
        return len(self.hidden) + 1

    def topology(self) -> str:
        chans = (1, *self.hidden, self.num_classes + 1)
        parts = []
        for i in range(self.layers):
            k = 1 if i == self.layers - 1 else 3
            relu = "" if i == self.layers - 1 else "+relu"
            parts.append(f"conv{k}x{k}({chans[i]}->{chans[i + 1]}){relu}")
        return ",".join(parts + ["softmax"])

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def logits(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        for i in range(1, self.layers + 1):
            h = ad.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"])
            if i < self.layers:
                h = ad.relu(h)
        return h

    def forward(self, images) -> ad.Tensor:
        """Probability map ``(B, m+1, H, W)`` for normalised images ``(B, H, W)`` or ``(B, 1, H, W)``."""
        x = images if isinstance(images, ad.Tensor) else ad.Tensor(np.asarray(images, dtype=np.float32))
        if x.data.ndim == 3:
            x = ad.reshape(x, (x.shape[0], 1, *x.shape[1:]))
        try:
            return ad.softmax_channels(self.logits(x))
        except ad.NonFiniteError as exc:
            stats = {k: float(np.abs(v.data).max()) for k, v in self.params.items()}
            raise ModelError(f"non-finite forward pass ({exc}); max |param| per layer: {stats}") from exc

    __call__ = forward

    def predict(self, images) -> np.ndarray:
        """Graph-free forward returning a plain array; parameters are never touched."""
        frozen = {k: ad.Tensor(v.data) for k, v in self.params.items()}
        saved, self.params = self.params, frozen
        try:
            return self.forward(images).data
        finally:
            self.params = saved

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ModelError(f"parameter {k} with shape {v.shape} does not fit this model")
            self.params[k].data[...] = v

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        return h.hexdigest()


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name in sorted(params):
            p = params[name]
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model: SegModel
    epoch: int = 0
    config_hash: str = ""
    optimizer: Optional[Adam] = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    model = ckpt.model
    blocks = [(k, v.data) for k, v in model.params.items()]
    lines = [
        MAGIC,
        f"topology={model.topology()}",
        f"num_classes={model.num_classes}",
        f"hidden={','.join(map(str, model.hidden))}",
        f"epoch={ckpt.epoch}",
        f"config_hash={ckpt.config_hash}",
    ]
    for k, v in sorted(ckpt.extra.items()):
        lines.append(f"{k}={v}")
    opt = ckpt.optimizer
    if opt is not None:
        lines += [f"adam_step={opt.step_count}", f"adam_lr={opt.lr!r}"]
        blocks += [(f"adam.m.{k}", opt.m[k]) for k in sorted(opt.m)]
        blocks += [(f"adam.v.{k}", opt.v[k]) for k in sorted(opt.v)]
    for name, arr in blocks:
        lines.append(f"tensor={name};{','.join(map(str, arr.shape))}")
    lines.append("END")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(MAGIC.encode()) or end < 0:
        raise ModelError(f"{path}: not a checkpoint file")
    header = raw[:end].decode().splitlines()[1:]
    meta, tensors = {}, []
    for line in header:
        key, _, value = line.partition("=")
        if key == "tensor":
            name, _, shape = value.partition(";")
            tensors.append((name, tuple(int(s) for s in shape.split(",") if s)))
        else:
            meta[key] = value
    offset = end + len(b"\nEND\n")
    arrays = {}
    for name, shape in tensors:
        n = int(np.prod(shape)) * 4
        arrays[name] = np.frombuffer(raw[offset : offset + n], dtype="<f4").reshape(shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ModelError(f"{path}: {len(raw) - offset} trailing bytes")
    hidden = tuple(int(h) for h in meta.pop("hidden").split(","))
    model = SegModel(int(meta.pop("num_classes")), hidden=hidden)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    topo = meta.pop("topology")
    if topo != model.topology():
        raise ModelError(f"{path}: topology {topo} does not match {model.topology()}")
    opt = None
    if "adam_step" in meta:
        opt = Adam(lr=float(meta.pop("adam_lr")), step_count=int(meta.pop("adam_step")))
        opt.m = {k[len("adam.m.") :]: v.copy() for k, v in arrays.items() if k.startswith("adam.m.")}
        opt.v = {k[len("adam.v.") :]: v.copy() for k, v in arrays.items() if k.startswith("adam.v.")}
    epoch = int(meta.pop("epoch"))
    config_hash = meta.pop("config_hash")
    return Checkpoint(model, epoch, config_hash, opt, meta)
