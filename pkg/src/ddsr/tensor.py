"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every operation records its parents and a closure mapping the output
gradient to per-parent gradients. ``Tensor.backward`` walks the recorded
graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

DTYPE = np.float64
NORM_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


_CONSTANT = Tensor(np.zeros(()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        # the requires_grad flag is captured now, so later unfreezing cannot
        # route gradient into an input that was frozen when the op ran
        kept = tuple(p if p.requires_grad else _CONSTANT for p in parents)
        return Tensor(data, requires_grad=True, _parents=kept, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,))


# ----------------------------------------------------------------- reductions
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# ------------------------------------------------------------------ structure
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in parts)

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r*r, H, W) -> (B, C, H*r, W*r)."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"pixel_shuffle: channels {c} not divisible by {r}^2")
    oc = c // (r * r)
    y = reshape(x, (b, oc, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (b, oc, h * r, w * r))


def adaptive_avg_pool2d(x: Tensor, output_size: int = 1) -> Tensor:
    b, c, h, w = x.shape
    if h % output_size or w % output_size:
        raise ValueError(f"adaptive_avg_pool2d: extents {(h, w)} not divisible by {output_size}")
    y = reshape(x, (b, c, output_size, h // output_size, output_size, w // output_size))
    return mean(y, axis=(3, 5))


# --------------------------------------------------------------------- linear
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward)


def l2_normalize(v: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    _check_axis(v, axis)
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    small = norm <= eps
    if np.any(small):
        logger.debug("l2_normalize: %d vector(s) below norm floor %g", int(small.sum()), eps)
    denom = np.maximum(norm, eps)
    out = v.data / denom

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(small, g / denom, (g - out * radial) / denom),)

    return _result(out, (v,), backward)


def _check_axis(x: Tensor, axis: int) -> None:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")


# ---------------------------------------------------------------- convolution
def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"conv input must be CHW or NCHW, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; x is NCHW (or CHW), weight OCkk."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    x, squeezed = _as_batched(x)
    if weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    b, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {weight.shape} larger than padded input {x.shape}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding:padding + h, padding:padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = _result(out, parents, backward)
    if squeezed:
        y = reshape(y, y.shape[1:])
    return y


def depthwise_conv2d(x: Tensor, kernel: Tensor, padding: int | None = None) -> Tensor:
    """Per-channel correlation with per-sample kernels.

    x is (B, C, H, W); kernel is (B, C, k, k) or (C, k, k). Stride 1, zero
    padding (``k // 2`` by default, keeping extents).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv2d input must be NCHW, got {x.shape}")
    shared = kernel.ndim == 3
    kd = kernel.data[None] if shared else kernel.data
    b, c, h, w = x.shape
    if kd.shape[1] != c or kd.shape[0] not in (1, b):
        raise ValueError(f"depthwise_conv2d shape mismatch: input {x.shape} vs kernel {kernel.shape}")
    kh, kw = kd.shape[2:]
    p = kh // 2 if padding is None else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwij,bcij->bchw", win, np.broadcast_to(kd, (b, c, kh, kw)), optimize=True)

    def backward(g):
        gk = None
        if kernel.requires_grad:
            gk = np.einsum("bchw,bchwij->bcij", g, win, optimize=True)
            if shared:
                gk = gk.sum(axis=0)
        gx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            kb = np.broadcast_to(kd, (b, c, kh, kw))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho, j:j + wo] += g * kb[:, :, i, j, None, None]
            gx = dxp[:, :, p:p + h, p:p + w]
        return gx, gk

    return _result(out, (x, kernel), backward)
