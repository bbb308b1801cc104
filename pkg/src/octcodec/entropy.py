"""Quantization, probability models and rate estimation."""

from __future__ import annotations

import math
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy import special

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore

P_MIN = 2.0**-16
TRAIN_LIKELIHOOD_FLOOR = 1e-9
PRIOR_FILTERS = (3, 3, 3)


class QuantMode(str, Enum):
    NOISE = "noise"
    ROUND = "round"


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(y, mode: Union[QuantMode, str], rng: Optional[np.random.Generator] = None):
    """Uniform-noise proxy (training) or rounding with ties away from zero (coding).

    Accepts a numpy array or a Tensor; in noise mode gradients flow through.
    """
    mode = QuantMode(mode)
    is_tensor = isinstance(y, Tensor)
    data = y.data if is_tensor else np.asarray(y)
    if mode is QuantMode.ROUND:
        out = round_half_away(data)
        return Tensor(out) if is_tensor else out
    if rng is None:
        raise ValueError("noise quantization needs an rng")
    u = rng.uniform(-0.5, 0.5, size=data.shape).astype(data.dtype)
    return y + Tensor(u) if is_tensor else data + u


def gaussian_bin_probability(k, mu, delta, floor: Optional[float] = None) -> np.ndarray:
    """P(k) under N(mu, delta^2) convolved with U(-1/2, 1/2); optionally floored."""
    p = ad.gaussian_bin_probability(k, mu, delta)
    return np.maximum(p, floor) if floor is not None else p


def gaussian_rate(y: Tensor, mu: Tensor, delta: Tensor, floor: float = P_MIN) -> Tensor:
    """Per-element bits of ``y`` under the conditional Gaussian model."""
    return ad.gaussian_bits(y, mu, delta, floor)


class FactorizedPrior:
    """Per-channel learned univariate CDF built from stacked monotone stages.

    Each stage is ``x -> x + tanh(a) * tanh(softplus(H) x + b)``-style with
    positive matrices, so the composite is monotone; a final sigmoid maps the
    logits to a CDF. Initialized to a logistic CDF of scale ``init_scale``.
    """

    def __init__(self, store: ParamStore, prefix: str, channels: int, init_scale: float = 1.0):
        self.channels = channels
        dims = (1,) + PRIOR_FILTERS + (1,)
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            d_in, d_out = dims[i], dims[i + 1]
            entry = 1.0 / init_scale if i == 0 else 1.0 / d_in
            raw = np.full((channels, d_out, d_in), math.log(math.expm1(entry)))
            self.matrices.append(store.create(f"{prefix}/matrix{i}", raw))
            self.biases.append(store.zeros(f"{prefix}/bias{i}", (channels, d_out, 1)))
            if i < len(dims) - 2:
                self.factors.append(store.zeros(f"{prefix}/factor{i}", (channels, d_out, 1)))

    def logits(self, x: Tensor) -> Tensor:
        """``x`` has shape (C, 1, S); returns CDF logits of the same shape."""
        for i, (m, b) in enumerate(zip(self.matrices, self.biases)):
            x = ad.bmm(ad.softplus(m), x) + b
            if i < len(self.factors):
                x = x + ad.tanh(self.factors[i]) * ad.tanh(x)
        return x

    def _channel_major(self, v: Tensor) -> Tensor:
        c = v.shape[-1]
        if c != self.channels:
            raise ValueError(f"prior has {self.channels} channels, input has {c}")
        flat = v.reshape(-1, c)
        return ad.transpose(flat).reshape(c, 1, -1)

    def likelihood(self, v: Tensor) -> Tensor:
        """P(v) = C(v + 1/2) - C(v - 1/2) per element, channels last."""
        cm = self._channel_major(v)
        lower = self.logits(cm - 0.5)
        upper = self.logits(cm + 0.5)
        sign = Tensor(np.where(lower.data + upper.data > 0, -1.0, 1.0).astype(v.dtype))
        p = ad.absolute(ad.sigmoid(sign * upper) - ad.sigmoid(sign * lower))
        c = v.shape[-1]
        return ad.transpose(p.reshape(c, -1)).reshape(v.shape)

    def bits(self, v: Tensor, floor: float = P_MIN) -> Tensor:
        return -ad.log2(ad.clamp_min(self.likelihood(v), floor))

    def pmf_table(self, window: np.ndarray) -> np.ndarray:
        """Unfloored probabilities of integer ``window`` values, shape (C, len(window))."""
        dtype = self.matrices[0].dtype
        ks = np.broadcast_to(np.asarray(window, dtype=dtype), (self.channels, len(window)))
        v = Tensor(np.ascontiguousarray(ks.T))  # (W, C) channels last
        return self.likelihood(v).data.T.astype(np.float64)

    def probability(self, k: int, channel: int) -> float:
        return float(self.pmf_table(np.array([k]))[channel, 0])


def factorized_prior_probability(k: int, channel: int, prior: FactorizedPrior) -> float:
    return prior.probability(k, channel)


def estimate_rate(probabilities, floor: float = P_MIN) -> float:
    """Total code length in bits of symbols with the given model probabilities."""
    p = np.maximum(np.asarray(probabilities, dtype=np.float64), floor)
    return float(-np.log2(p).sum())


def logistic_bin_probability(k: float, scale: float = 1.0) -> float:
    return float(special.expit((k + 0.5) / scale) - special.expit((k - 0.5) / scale))
