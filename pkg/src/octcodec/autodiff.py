"""Minimal reverse-mode autodiff over numpy arrays.

Only the operator set needed by the codec is provided. Feature maps are laid
out NHWC; kernels are ``(k, k, Cin, Cout)``.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

logger = logging.getLogger(__name__)

_LN2 = float(np.log(2.0))
_LN10 = float(np.log(10.0))


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ValueError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
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


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def log2(a: Tensor) -> Tensor:
    return _make(np.log2(a.data), (a,), lambda g: (g / (a.data * _LN2),))


def log10(a: Tensor) -> Tensor:
    return _make(np.log10(a.data), (a,), lambda g: (g / (a.data * _LN10),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = a.data >= 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero wherever the floor is active."""
    keep = a.data >= floor
    out = np.where(keep, a.data, np.asarray(floor, dtype=a.dtype))
    return _make(out, (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------------------
# shape / reduction


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return _make(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    parts = []
    start = 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + n)
        parts.append(getitem(a, tuple(idx)))
        start += n
    return parts


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a @ w`` with ``w`` two-dimensional; ``a`` may carry leading batch axes."""
    w = _operand(w, a)
    out = a.data @ w.data

    def bw(g):
        ga = g @ w.data.T
        gw = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _make(out, (a, w), bw)


def bmm(w: Tensor, x: Tensor) -> Tensor:
    """Channel-batched product: ``w`` (C, O, I) times ``x`` (C, I, S) -> (C, O, S)."""
    out = np.matmul(w.data, x.data)

    def bw(g):
        gw = np.matmul(g, np.swapaxes(x.data, 1, 2))
        gx = np.matmul(np.swapaxes(w.data, 1, 2), g)
        return _unbroadcast(gw, w.shape), _unbroadcast(gx, x.shape)

    return _make(out, (w, x), bw)


# ---------------------------------------------------------------------------
# convolution kernels (raw numpy)


def _conv_out(n: int, stride: int) -> int:
    return -(-n // stride)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: (N, Ho, Wo, Cin, kh, kw)
    return np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))


def _conv_grad_kernel(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    gw = np.tensordot(win, g, axes=([0, 1, 2], [0, 1, 2]))  # (Cin, kh, kw, Cout)
    return np.ascontiguousarray(gw.transpose(1, 2, 0, 3))


def _conv_grad_input(g: np.ndarray, w: np.ndarray, stride: int, in_hw: tuple) -> np.ndarray:
    k = w.shape[0]
    p = k // 2
    n, ho, wo, _ = g.shape
    h, wd = in_hw
    cols = np.tensordot(g, w, axes=([3], [3]))  # (N, Ho, Wo, kh, kw, Cin)
    hp, wp = h + 2 * p, wd + 2 * p
    dxp = np.zeros((n, hp, wp, w.shape[2]), dtype=cols.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + span_h : stride, j : j + span_w : stride, :] += cols[:, :, :, i, j, :]
    return dxp[:, p : p + h, p : p + wd, :]


def _check_4d(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects an NHWC tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Zero-padded "same" convolution: output spatial size is ceil(input / stride)."""
    _check_4d(x, "conv2d")
    k, k2, cin, _ = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {kernel.shape[:2]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    in_hw = x.shape[1:3]
    out = _conv_forward(x.data, kernel.data, stride)

    def bw(g):
        gx = _conv_grad_input(g, kernel.data, stride, in_hw) if x.requires_grad else None
        gk = _conv_grad_kernel(x.data, g, k, stride) if kernel.requires_grad else None
        return gx, gk

    y = _make(out, (x, kernel), bw)
    return y if bias is None else add(y, bias)


def tconv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``kernel`` has shape ``(k, k, Cout, Cin)``: it is the kernel of the conv2d
    mapping the output back to the input. Output spatial size is input * stride.
    """
    _check_4d(x, "tconv2d")
    k, k2, cout, cin = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"tconv2d needs a square odd kernel, got {kernel.shape[:2]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    out_hw = (x.shape[1] * stride, x.shape[2] * stride)
    out = _conv_grad_input(x.data, kernel.data, stride, out_hw)

    def bw(g):
        gx = _conv_forward(g, kernel.data, stride) if x.requires_grad else None
        gk = _conv_grad_kernel(g, x.data, k, stride) if kernel.requires_grad else None
        return gx, gk

    y = _make(out, (x, kernel), bw)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# fixed filters for SSIM


def _correlate_valid(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    win = sliding_window_view(x, len(taps), axis=axis)
    out = win @ taps
    return out


def _correlate_full_adjoint(g: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    k = len(taps)
    pad = [(0, 0)] * g.ndim
    pad[axis] = (k - 1, k - 1)
    gp = np.pad(g, pad)
    return _correlate_valid(gp, taps[::-1].copy(), axis)


def separable_filter_valid(x: Tensor, taps: np.ndarray) -> Tensor:
    """Valid-mode separable correlation over axes 1 and 2 of an (N, H, W) tensor."""
    taps = np.asarray(taps, dtype=x.dtype)
    out = _correlate_valid(_correlate_valid(x.data, taps, 1), taps, 2)

    def bw(g):
        return (_correlate_full_adjoint(_correlate_full_adjoint(g, taps, 2), taps, 1),)

    return _make(out, (x,), bw)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling over axes 1 and 2 of (N, H, W); odd sizes repeat the last row/column."""
    n, h, w = x.shape
    pad_h, pad_w = h % 2, w % 2
    xp = x.data
    if pad_h or pad_w:
        xp = np.pad(xp, ((0, 0), (0, pad_h), (0, pad_w)), mode="symmetric")
    hh, ww = xp.shape[1] // 2, xp.shape[2] // 2
    out = xp.reshape(n, hh, 2, ww, 2).mean(axis=(2, 4))

    def bw(g):
        gp = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        if pad_h:
            gp[:, h - 1, :] += gp[:, h, :]
            gp = gp[:, :h]
        if pad_w:
            gp[:, :, w - 1] += gp[:, :, w]
            gp = gp[:, :, :w]
        return (gp,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# likelihood helpers


def gaussian_bits(v: Tensor, mu: Tensor, delta: Tensor, floor: float) -> Tensor:
    """Per-element code length ``-log2 max(p, floor)`` of value ``v`` under N(mu, delta^2) * U(-1/2, 1/2)."""
    vd, md, dd = v.data, mu.data, delta.data
    centered = vd - md
    # evaluate in the lower tail for numerical headroom
    s = np.where(centered > 0, -1.0, 1.0).astype(vd.dtype)
    a = s * (centered + 0.5) / dd
    b = s * (centered - 0.5) / dd
    pa = special.ndtr(a)
    pb = special.ndtr(b)
    p = np.abs(pa - pb)
    active = p > floor
    pc = np.where(active, p, floor)
    out = (-np.log2(pc)).astype(vd.dtype, copy=False)

    def bw(g):
        phi_a = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
        phi_b = np.exp(-0.5 * b * b) / np.sqrt(2.0 * np.pi)
        # p = |Φ(a) - Φ(b)|, sign of (Φ(a)-Φ(b)) equals s
        dp_dc = (phi_a - phi_b) / dd  # d|.|/d(centered) after the s*s=1 cancellation
        dp_dd = -(phi_a * a - phi_b * b) / dd * s
        coef = np.where(active, -g / (pc * _LN2), 0.0)
        gv = coef * dp_dc
        gd = coef * dp_dd
        return _unbroadcast(gv, v.shape), _unbroadcast(-gv, mu.shape), _unbroadcast(gd, delta.shape)

    return _make(out, (v, mu, delta), bw)


def gaussian_bin_probability(k, mu, delta) -> np.ndarray:
    """Mass of N(mu, delta^2) on [k - 1/2, k + 1/2] (no floor), vectorized over numpy inputs."""
    k = np.asarray(k, dtype=np.float64)
    centered = k - np.asarray(mu, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    s = np.where(centered > 0, -1.0, 1.0)
    return np.abs(special.ndtr(s * (centered + 0.5) / delta) - special.ndtr(s * (centered - 0.5) / delta))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]


def gdn(x: Tensor, beta: Tensor, gamma: Tensor, inverse: bool = False) -> Tensor:
    """Generalized divisive normalization over the channel axis.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)``; the inverse multiplies
    instead. ``beta`` and ``gamma`` are the effective (already nonnegative) values.
    """
    norm = add(matmul(square(x), transpose(gamma)), beta)
    root = sqrt(norm)
    return mul(x, root) if inverse else div(x, root)
