"""The multi-frequency codec network: core transforms, hyperprior and HF parameter estimator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .entropy import FactorizedPrior
from .octave import (
    ConvPath,
    Identity,
    LeakyReLU,
    MFTensor,
    OctaveConv,
    OctaveTConv,
    SCALING_CENTER,
    gdn_act,
    igdn_act,
    leaky_act,
    linear_act,
    split_channels,
)
from .params import ParamStore

CORE_STAGES = 4
HYPER_STAGES = 3
# IGDN grows superlinearly; a damped init keeps the untrained decoder output O(1)
DECODER_INIT_GAIN = 0.65


@dataclass
class CodecConfig:
    n: int = 448
    alpha: float = 0.5
    m: int = 256
    sigma_min: float = 0.11
    core_kernel: int = 5
    hyper_kernels: tuple = (3, 5, 5)
    hyper_strides: tuple = (1, 2, 2)
    fpe_kernel: int = 5
    # log10 lambda mapped to the Scaling-net input origin
    lambda_center: float = SCALING_CENTER

    def __post_init__(self):
        self.hyper_kernels = tuple(self.hyper_kernels)
        self.hyper_strides = tuple(self.hyper_strides)
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        for name, total in (("n", self.n), ("m", self.m)):
            lf = self.alpha * total
            if abs(lf - round(lf)) > 1e-9 or round(lf) in (0, total):
                raise ValueError(f"alpha * {name} must be an integer strictly between 0 and {name}")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if len(self.hyper_kernels) != HYPER_STAGES or len(self.hyper_strides) != HYPER_STAGES:
            raise ValueError(f"hyper kernels/strides need {HYPER_STAGES} entries")

    @property
    def granule(self) -> int:
        """Input side lengths must be multiples of this (LF core x32, hyper x4)."""
        hyper = int(np.prod(self.hyper_strides))
        return 32 * hyper

    @property
    def n_split(self) -> tuple[int, int]:
        return split_channels(self.n, self.alpha)

    @property
    def m_split(self) -> tuple[int, int]:
        return split_channels(self.m, self.alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper_kernels"] = list(self.hyper_kernels)
        d["hyper_strides"] = list(self.hyper_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CodecConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


PRESETS = {
    "paper": CodecConfig(n=448, alpha=0.5, m=256),
    "tiny": CodecConfig(n=32, alpha=0.5, m=32),
}


def named_config(name: str) -> CodecConfig:
    try:
        return CodecConfig.from_dict(PRESETS[name].to_dict())
    except KeyError:
        raise ValueError(f"unknown config preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class EntropyParams:
    mu: Tensor
    delta: Tensor


class CodecModel:
    """All learnable parts of the codec, registered in one :class:`ParamStore`."""

    def __init__(self, config: CodecConfig, dtype=np.float32, seed: int = 0):
        self.config = config
        self.store = ParamStore(dtype=dtype, seed=seed)
        store = self.store
        cfg = config
        nh, nl = cfg.n_split
        mh, ml = cfg.m_split
        k = cfg.core_kernel

        self.core_enc = [OctaveConv(store, "core_enc/l0", 3, (nh, nl), k, 2, gdn_act, True, "first")]
        for i in range(1, CORE_STAGES):
            self.core_enc.append(OctaveConv(store, f"core_enc/l{i}", (nh, nl), (nh, nl), k, 2, gdn_act, True))

        self.core_dec = []
        for i in range(CORE_STAGES - 1):
            self.core_dec.append(
                OctaveTConv(store, f"core_dec/l{i}", (nh, nl), (nh, nl), k, 2, igdn_act, True, init_gain=DECODER_INIT_GAIN)
            )
        self.core_dec.append(
            OctaveTConv(store, f"core_dec/l{CORE_STAGES - 1}", (nh, nl), 3, k, 2, igdn_act, True, "last", DECODER_INIT_GAIN)
        )

        hk, hs = cfg.hyper_kernels, cfg.hyper_strides
        self.hyper_enc = []
        chans = (nh, nl)
        for i in range(HYPER_STAGES):
            last = i == HYPER_STAGES - 1
            out = (mh, ml) if last else (nh, nl)
            act = linear_act if last else leaky_act
            self.hyper_enc.append(OctaveConv(store, f"hyper_enc/l{i}", chans, out, hk[i], hs[i], act, False))
            chans = out

        self.hyper_dec = []
        for i in range(HYPER_STAGES):
            j = HYPER_STAGES - 1 - i
            last = i == HYPER_STAGES - 1
            out = (2 * nh, 2 * nl) if last else (nh, nl)
            act = linear_act if last else leaky_act
            self.hyper_dec.append(OctaveTConv(store, f"hyper_dec/l{i}", chans, out, hk[j], hs[j], act, False))
            chans = out

        fk = cfg.fpe_kernel
        leaky = LeakyReLU()
        self.fpe_up = ConvPath(store, "fpe", "up", nl, nh, fk, 2, True, Identity(), False)
        self.fpe_1 = ConvPath(store, "fpe", "c1", 3 * nh, 2 * nh, 1, 1, False, leaky, False)
        self.fpe_2 = ConvPath(store, "fpe", "c2", 2 * nh, 2 * nh, 1, 1, False, leaky, False)
        self.fpe_3 = ConvPath(store, "fpe", "c3", 2 * nh, 2 * nh, 1, 1, False, Identity(), False)

        self.prior_zh = FactorizedPrior(store, "prior_zh", mh)
        self.prior_zl = FactorizedPrior(store, "prior_zl", ml)

        for layer in self.core_enc + self.core_dec:
            for path in vars(layer).values():
                if isinstance(path, ConvPath) and path.scaling is not None:
                    path.scaling.center = cfg.lambda_center

    @property
    def dtype(self):
        return self.store.dtype

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[3] != 3:
            raise ValueError(f"expected an N x H x W x 3 image batch, got {x.shape}")
        g = self.config.granule
        h, w = x.shape[1:3]
        if h % g or w % g:
            raise ValueError(f"image dims {(h, w)} must be multiples of {g}; pad first")

    def encode_analysis(self, x: Tensor, lam) -> MFTensor:
        self._check_input(x)
        y = MFTensor(x)
        for layer in self.core_enc:
            y = layer(y, lam)
        return y

    def decode_synthesis(self, y_hat: MFTensor, lam) -> Tensor:
        nh, nl = self.config.n_split
        if y_hat.hf.shape[3] != nh or y_hat.lf.shape[3] != nl:
            raise ValueError(f"latent channels {(y_hat.hf.shape[3], y_hat.lf.shape[3])} != {(nh, nl)}")
        x = y_hat
        for layer in self.core_dec:
            x = layer(x, lam)
        return x

    def hyper_encode(self, y: MFTensor) -> MFTensor:
        total = int(np.prod(self.config.hyper_strides))
        h, w = y.lf.shape[1:3]
        if h % total or w % total:
            raise ValueError(f"LF latent dims {(h, w)} are not divisible by the hyper downsampling {total}")
        z = y
        for layer in self.hyper_enc:
            z = layer(z, None, modulate=False)
        return z

    def hyper_decode(self, z_hat: MFTensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(mu_l, delta_l, psi_h)``."""
        out = z_hat
        for layer in self.hyper_dec:
            out = layer(out, None, modulate=False)
        nl = self.config.n_split[1]
        mu_l, raw = ad.split(out.lf, [nl, nl], axis=-1)
        delta_l = ad.softplus(raw) + self.config.sigma_min
        return mu_l, delta_l, out.hf

    def estimate_hf_params(self, y_l_hat: Tensor, psi_h: Tensor) -> EntropyParams:
        up = self.fpe_up(y_l_hat, None, False)
        if up.shape[1:3] != psi_h.shape[1:3]:
            raise ValueError(f"upsampled LF latents {up.shape[1:3]} do not match side info {psi_h.shape[1:3]}")
        h = ad.concat([up, psi_h], axis=-1)
        h = self.fpe_3(self.fpe_2(self.fpe_1(h, None, False), None, False), None, False)
        nh = self.config.n_split[0]
        mu, raw = ad.split(h, [nh, nh], axis=-1)
        return EntropyParams(mu, ad.softplus(raw) + self.config.sigma_min)

    def entropy_params(self, z_hat: MFTensor, y_l_hat: Tensor) -> tuple[EntropyParams, EntropyParams]:
        """LF then HF entropy parameters, the HF ones conditioned on the decoded LF latents."""
        mu_l, delta_l, psi_h = self.hyper_decode(z_hat)
        return EntropyParams(mu_l, delta_l), self.estimate_hf_params(y_l_hat, psi_h)

    def latent_shapes(self, height: int, width: int) -> dict[str, tuple]:
        nh, nl = self.config.n_split
        mh, ml = self.config.m_split
        hs = int(np.prod(self.config.hyper_strides))
        return {
            "y_h": (1, height // 16, width // 16, nh),
            "y_l": (1, height // 32, width // 32, nl),
            "z_h": (1, height // (16 * hs), width // (16 * hs), mh),
            "z_l": (1, height // (32 * hs), width // (32 * hs), ml),
        }
