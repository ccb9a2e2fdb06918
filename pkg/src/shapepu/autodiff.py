"""Small dense-tensor reverse-mode autodiff.

Only the handful of operations needed by the segmentation model and the
training losses are provided: same-padded stride-1 convolution, ReLU,
channel softmax, elementwise arithmetic, clamped log, reductions,
reshaping, dot products, norms and the exact dihedral pixel permutations
used by the cutout augmentation.

Tensors are laid out as ``(batch, channel, height, width)`` where a rank-4
layout applies. Values default to float32; float64 inputs stay float64,
which is what the finite-difference checks use. Reductions accumulate in
float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64:
        return arr
    return arr.astype(np.float32, copy=False)


class Tensor:
    """A value in the computation graph.

    ``requires_grad`` leaves own a zero-initialised ``grad`` array that
    :func:`backward` accumulates into. Intermediate results keep a reference
    to their parents and a closure mapping the output gradient to parent
    gradients.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        dtype=None,
        name: str = "",
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        _op: str = "",
    ):
        self.data = _as_array(data, dtype)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by {_op or 'input'} {name}".strip())
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if (self.requires_grad and not _parents) else None
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=needs,
        _parents=parents if needs else (),
        _backward=backward if needs else None,
        _op=op,
    )


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no general broadcasting)")


def _reduce_to(grad: np.ndarray, t: Tensor) -> np.ndarray:
    # only scalar operands are ever broadcast
    if grad.shape == t.shape:
        return grad
    return np.asarray(grad.sum(dtype=np.float64), dtype=t.dtype).reshape(t.shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_same_shape(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_same_shape(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_same_shape(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        return _reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)

    return _make(out, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at exactly 0 is 0."""
    active = x.data > 0

    def bw(g):
        return (g * active,)

    return _make(np.where(active, x.data, 0).astype(x.dtype), (x,), bw, "relu")


def log(x: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log of ``max(x, eps)``; no gradient flows where the clamp is active."""
    clamped = np.maximum(x.data, eps)
    live = x.data > eps

    def bw(g):
        return (np.where(live, g / clamped, 0).astype(x.dtype),)

    return _make(np.log(clamped), (x,), bw, "log")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, dtype=np.float64, keepdims=keepdims).astype(x.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal 1-D shapes, got {a.shape} and {b.shape}")
    out = np.dot(a.data.astype(np.float64), b.data.astype(np.float64))

    def bw(g):
        return (g * b.data).astype(a.dtype), (g * a.data).astype(b.dtype)

    return _make(np.asarray(out, dtype=a.dtype), (a, b), bw, "dot")


def l2norm(x: Tensor) -> Tensor:
    nrm = float(np.sqrt(np.sum(np.square(x.data, dtype=np.float64))))
    if nrm == 0.0:
        raise ZeroDivisionError("l2norm: zero vector has no gradient")

    def bw(g):
        return ((g / nrm) * x.data).astype(x.dtype),

    return _make(np.asarray(nrm, dtype=x.dtype), (x,), bw, "l2norm")


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def take(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[b]`` to pick one image of a batch."""

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), bw, "take")


def dihedral(x: Tensor, k: int, flip: bool) -> Tensor:
    """Rotate the two trailing axes by ``k`` quarter turns, then optionally flip left-right."""
    out = dihedral_array(x.data, k, flip)

    def bw(g):
        return (inverse_dihedral_array(g, k, flip),)

    return _make(out, (x,), bw, "dihedral")


def dihedral_array(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def inverse_dihedral_array(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, -(k % 4), axes=(-2, -1)))


# ---------------------------------------------------------------- network ops


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, H*W) patches for a same-padded window."""
    b, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph:ph + h, pw:pw + w] = x
    cols = np.empty((b, c, kh, kw, h, w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(b, c * kh * kw, h * w)


def _correlate(x: np.ndarray, w: np.ndarray, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Same-padded cross-correlation of (B,C,H,W) with (O,C,kh,kw) -> (B,O,H,W)."""
    b, _, h, wd = x.shape
    out_ch, _, kh, kw = w.shape
    if cols is None:
        cols = x.reshape(b, -1, h * wd) if kh == kw == 1 else _im2col(x, kh, kw)
    out = np.matmul(w.reshape(out_ch, -1), cols)
    return out.reshape(b, out_ch, h, wd)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-1 convolution (cross-correlation) with zero padding preserving H and W."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {x.shape}, {kernel.shape}")
    out_ch, in_ch, kh, kw = kernel.shape
    if x.shape[1] != in_ch:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, kernel expects {in_ch}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial size must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (out_ch,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({out_ch},)")

    b, _, h, wd = x.shape
    xd = x.data.astype(kernel.dtype, copy=False)
    cols = xd.reshape(b, in_ch, h * wd) if kh == kw == 1 else _im2col(xd, kh, kw)
    out = _correlate(xd, kernel.data, cols)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _correlate(g, np.ascontiguousarray(flipped)).astype(x.dtype, copy=False)
        if kernel.requires_grad:
            gm = g.reshape(b, out_ch, h * wd)
            gk = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0)
            gk = gk.reshape(kernel.shape).astype(kernel.dtype, copy=False)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    return _make(out, parents, bw, "conv2d")


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 1 with per-pixel max subtraction."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = np.sum(g * s, axis=1, keepdims=True)
        return ((s * (g - inner)).astype(logits.dtype),)

    return _make(s.astype(logits.dtype), (logits,), bw, "softmax")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Propagate d(loss)/d(node) to every reachable ``requires_grad`` leaf.

    Leaf gradients accumulate across calls until :meth:`Tensor.zero_grad`.
    Returns a mapping from each reached leaf to its accumulated gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad += g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves
