"""Generalized octave convolutions with optional lambda modulation.

Every layer has four paths between the high-frequency (full resolution) and
low-frequency (half resolution) feature maps. Each path is a convolution,
optionally scaled channel-wise by a Scaling-net output, then an activation::

    Y_hh = Act(f(X_h) * s_hh)          Y_ll = Act(f(X_l) * s_ll)
    Y_h  = Y_hh + Act(g_up2(Y_ll) * s_lh)
    Y_l  = Y_ll + Act(f_down2(Y_hh) * s_hl)

The transposed layer is the same with the intra-frequency convolutions replaced
by transposed convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

BETA_MIN = 1e-6
GAMMA_OFFDIAG_INIT = 1e-4
SCALING_HIDDEN = 16
# log10 lambda origin of the Scaling-net input; a model sets the center of its band
SCALING_CENTER = -2.0
LEAKY_SLOPE = 0.2


@dataclass
class MFTensor:
    """High/low frequency pair; ``lf`` has half the spatial size of ``hf``."""

    hf: Optional[Tensor]
    lf: Optional[Tensor] = None

    def __post_init__(self):
        if self.hf is not None and self.lf is not None:
            h, w = self.hf.shape[1:3]
            if self.lf.shape[1:3] != (h // 2, w // 2) or h % 2 or w % 2:
                raise ValueError(f"LF spatial dims {self.lf.shape[1:3]} are not half of HF dims {(h, w)}")
            if self.lf.shape[0] != self.hf.shape[0]:
                raise ValueError("HF and LF batch sizes differ")

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.hf, self.lf) if t is not None]


def split_channels(total: int, alpha: float) -> tuple[int, int]:
    """Return ``(hf, lf)`` channel counts for a total budget."""
    lf = int(round(alpha * total))
    return total - lf, lf


def inv_softplus(v: float) -> float:
    return float(np.log(np.expm1(v)))


# ---------------------------------------------------------------------------
# activations


class GDN:
    """GDN/IGDN with softplus-reparameterized, floored parameters."""

    def __init__(self, store: ParamStore, prefix: str, channels: int, inverse: bool = False):
        self.inverse = inverse
        self.beta_raw = store.create(f"{prefix}/beta", np.full(channels, inv_softplus(1.0 - BETA_MIN)))
        gamma = np.full((channels, channels), inv_softplus(GAMMA_OFFDIAG_INIT))
        np.fill_diagonal(gamma, inv_softplus(0.1))
        self.gamma_raw = store.create(f"{prefix}/gamma", gamma)

    def effective(self) -> tuple[Tensor, Tensor]:
        return ad.softplus(self.beta_raw) + BETA_MIN, ad.softplus(self.gamma_raw)

    def __call__(self, x: Tensor) -> Tensor:
        beta, gamma = self.effective()
        return ad.gdn(x, beta, gamma, inverse=self.inverse)


class LeakyReLU:
    def __init__(self, slope: float = LEAKY_SLOPE):
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, self.slope)


class Identity:
    def __call__(self, x: Tensor) -> Tensor:
        return x


ActFactory = Callable[[ParamStore, str, int], Callable[[Tensor], Tensor]]


def gdn_act(store, prefix, channels):
    return GDN(store, prefix, channels, inverse=False)


def igdn_act(store, prefix, channels):
    return GDN(store, prefix, channels, inverse=True)


def leaky_act(store, prefix, channels):
    return LeakyReLU()


def linear_act(store, prefix, channels):
    return Identity()


# ---------------------------------------------------------------------------
# building blocks


class ScalingNet:
    """Maps lambda to a positive per-channel gain: exp(W2 lrelu(W1 (log10(lambda) - c) + b1) + b2).

    The fixed offset ``c`` only moves the origin (``b1`` can absorb it). With
    inputs of one sign, the gradient of the large-lambda samples would raise
    the gain of the small-lambda ones even faster.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int, hidden: int = SCALING_HIDDEN):
        self.channels = channels
        self.center = SCALING_CENTER
        self.w1 = store.uniform(f"{prefix}/w1", (1, hidden), 1.0)
        self.b1 = store.uniform(f"{prefix}/b1", (hidden,), 1.0)
        self.w2 = store.uniform(f"{prefix}/w2", (hidden, channels), 0.05)
        self.b2 = store.zeros(f"{prefix}/b2", (channels,))

    def __call__(self, lam: Tensor) -> Tensor:
        """``lam`` has shape (N,); returns gains of shape (N, C)."""
        if np.any(lam.data <= 0):
            raise ValueError("lambda must be strictly positive")
        u = (ad.log10(lam) - self.center).reshape(-1, 1)
        h = ad.leaky_relu(u @ self.w1 + self.b1, LEAKY_SLOPE)
        return ad.exp(h @ self.w2 + self.b2)


def scaling_net(lam, net: ScalingNet) -> Tensor:
    lam = lam if isinstance(lam, Tensor) else Tensor(np.atleast_1d(np.asarray(lam, dtype=net.w1.dtype)))
    return net(lam)


class ConvPath:
    """One convolution (or transposed convolution) with its optional Scaling-net and activation."""

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        name: str,
        cin: int,
        cout: int,
        kernel: int,
        stride: int,
        transposed: bool,
        act: Callable[[Tensor], Tensor],
        modulated: bool,
        init_gain: float = 1.0,
    ):
        self.stride = stride
        self.transposed = transposed
        if transposed:
            shape = (kernel, kernel, cout, cin)
            fan_in = kernel * kernel * cin / (stride * stride)
        else:
            shape = (kernel, kernel, cin, cout)
            fan_in = kernel * kernel * cin
        self.kernel = store.uniform(f"{prefix}/phi_{name}/kernel", shape, init_gain * math.sqrt(3.0 / fan_in))
        self.bias = store.zeros(f"{prefix}/phi_{name}/bias", (cout,))
        self.scaling = ScalingNet(store, f"{prefix}/theta_{name}", cout) if modulated else None
        self.act = act

    def linear(self, x: Tensor) -> Tensor:
        op = ad.tconv2d if self.transposed else ad.conv2d
        return op(x, self.kernel, self.bias, stride=self.stride)

    def __call__(self, x: Tensor, lam: Optional[Tensor], modulate: bool = True) -> Tensor:
        y = self.linear(x)
        if modulate and self.scaling is not None:
            if lam is None:
                raise ValueError("a modulated layer needs lambda")
            gain = self.scaling(lam)
            y = y * gain.reshape(gain.shape[0], 1, 1, gain.shape[1])
        return self.act(y)


def _as_lambda(lam, batch: int, dtype) -> Optional[Tensor]:
    if lam is None:
        return None
    if not isinstance(lam, Tensor):
        arr = np.asarray(lam, dtype=dtype).reshape(-1)
        if arr.size == 1 and batch > 1:
            arr = np.full(batch, arr[0], dtype=dtype)
        lam = Tensor(arr)
    if lam.data.size not in (1, batch):
        raise ValueError(f"got {lam.data.size} lambdas for a batch of {batch}")
    return lam


# ---------------------------------------------------------------------------
# layers


class OctaveConv:
    """GoConv, or M-GoConv when ``modulated``.

    ``mode="first"`` takes a single-frequency input (the image): the HF output is
    ``Act(f_s(x))`` and the LF output ``Act(f_down2(f_s(x)))`` through its own kernels.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        in_channels: Union[int, tuple[int, int]],
        out_channels: tuple[int, int],
        kernel: int = 5,
        stride: int = 1,
        act: ActFactory = gdn_act,
        modulated: bool = True,
        mode: str = "interior",
    ):
        if mode not in ("first", "interior"):
            raise ValueError(f"unknown OctaveConv mode {mode!r}")
        self.mode = mode
        self.modulated = modulated
        out_h, out_l = out_channels

        def path(name, cin, cout, stride_, transposed=False, with_act=True):
            a = act(store, f"{prefix}/act_{name}", cout) if with_act else Identity()
            return ConvPath(store, prefix, name, cin, cout, kernel, stride_, transposed, a, modulated)

        if mode == "first":
            cin = int(in_channels)
            self.hh = path("hh", cin, out_h, stride)
            self.hl_pre = ConvPath(store, prefix, "hl_pre", cin, out_l, kernel, stride, False, Identity(), False)
            self.hl = path("hl", out_l, out_l, 2)
        else:
            in_h, in_l = in_channels
            self.hh = path("hh", in_h, out_h, stride)
            self.ll = path("ll", in_l, out_l, stride)
            self.lh = path("lh", out_l, out_h, 2, transposed=True)
            self.hl = path("hl", out_h, out_l, 2)

    def __call__(self, x: MFTensor, lam=None, modulate: bool = True) -> MFTensor:
        batch = x.hf.shape[0]
        lam = _as_lambda(lam, batch, x.hf.dtype) if modulate else None
        if self.mode == "first":
            if x.lf is not None:
                raise ValueError("first-mode octave layer takes a single-frequency input")
            y_h = self.hh(x.hf, lam, modulate)
            y_l = self.hl(self.hl_pre(x.hf, None, False), lam, modulate)
            return MFTensor(y_h, y_l)
        if x.hf is None or x.lf is None:
            raise ValueError("interior octave layer needs both HF and LF inputs")
        h, w = x.hf.shape[1:3]
        if h % 2 or w % 2:
            raise ValueError(f"HF spatial dims must be even, got {(h, w)}")
        y_hh = self.hh(x.hf, lam, modulate)
        y_ll = self.ll(x.lf, lam, modulate)
        y_h = y_hh + self.lh(y_ll, lam, modulate)
        y_l = y_ll + self.hl(y_hh, lam, modulate)
        return MFTensor(y_h, y_l)


class OctaveTConv:
    """GoTConv, or M-GoTConv when ``modulated``.

    ``mode="last"`` merges both bands into one map at twice the HF resolution:
    ``g_up2(Y_h) * s_hh + g_up2(g_up2(Y_l)) * s_lh`` with no activation.
    """

    def __init__(
        self,
        store: ParamStore,
        prefix: str,
        in_channels: tuple[int, int],
        out_channels: Union[int, tuple[int, int]],
        kernel: int = 5,
        stride: int = 2,
        act: ActFactory = igdn_act,
        modulated: bool = True,
        mode: str = "interior",
        init_gain: float = 1.0,
    ):
        if mode not in ("interior", "last"):
            raise ValueError(f"unknown OctaveTConv mode {mode!r}")
        self.mode = mode
        self.modulated = modulated
        in_h, in_l = in_channels

        def path(name, cin, cout, stride_, transposed=True, with_act=True):
            a = act(store, f"{prefix}/act_{name}", cout) if with_act else Identity()
            return ConvPath(store, prefix, name, cin, cout, kernel, stride_, transposed, a, modulated, init_gain)

        if mode == "last":
            cout = int(out_channels)
            self.hh = path("hh", in_h, cout, 2, with_act=False)
            self.lh_pre = ConvPath(store, prefix, "lh_pre", in_l, in_l, kernel, 2, True, Identity(), False, init_gain)
            self.lh = path("lh", in_l, cout, 2, with_act=False)
        else:
            out_h, out_l = out_channels
            self.hh = path("hh", in_h, out_h, stride)
            self.ll = path("ll", in_l, out_l, stride)
            self.lh = path("lh", out_l, out_h, 2)
            self.hl = path("hl", out_h, out_l, 2, transposed=False)

    def __call__(self, y: MFTensor, lam=None, modulate: bool = True):
        if y.hf is None or y.lf is None:
            raise ValueError("octave transposed layer needs both HF and LF inputs")
        batch = y.hf.shape[0]
        lam = _as_lambda(lam, batch, y.hf.dtype) if modulate else None
        if self.mode == "last":
            return self.hh(y.hf, lam, modulate) + self.lh(self.lh_pre(y.lf, None, False), lam, modulate)
        x_hh = self.hh(y.hf, lam, modulate)
        x_ll = self.ll(y.lf, lam, modulate)
        x_h = x_hh + self.lh(x_ll, lam, modulate)
        x_l = x_ll + self.hl(x_hh, lam, modulate)
        return MFTensor(x_h, x_l)


def m_goconv(x: MFTensor, lam, layer: OctaveConv) -> MFTensor:
    return layer(x, lam, modulate=True)


def goconv(x: MFTensor, layer: OctaveConv) -> MFTensor:
    return layer(x, None, modulate=False)


def m_gotconv(y: MFTensor, lam, layer: OctaveTConv):
    return layer(y, lam, modulate=True)


def gotconv(y: MFTensor, layer: OctaveTConv):
    return layer(y, None, modulate=False)
