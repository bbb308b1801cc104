"""Entropy coding of quantized latents into the four substreams.

Each substream is raw range-coder output. It starts with the symbol window
``[lo, hi]`` (two 32-bit zigzag bypass values); every symbol is then coded with
a table over the window plus one escape entry. Escaped symbols are followed by
their 32-bit zigzag value in bypass mode.

Coding order is z^H, z^L (factorized priors), y^L (Gaussian from the hyper
decoder), y^H (Gaussian conditioned on the decoded y^L).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gaussian_bin_probability
from .entropy import P_MIN, FactorizedPrior
from .model import CodecModel
from .octave import MFTensor
from .rangecoder import (
    RangeCoderError,
    RangeDecoder,
    RangeEncoder,
    decode_symbol,
    encode_symbols,
    quantize_pmf,
)

logger = logging.getLogger(__name__)

TABLE_BOUND = 255
STREAM_ORDER = ("z_h", "z_l", "y_l", "y_h")
_VALUE_BITS = 32


class LatentDecodeError(ValueError):
    pass


def _zigzag(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzigzag(u: int) -> int:
    return (u >> 1) if u % 2 == 0 else -((u + 1) >> 1)


def symbol_window(symbols: np.ndarray, bound: int = TABLE_BOUND) -> tuple[int, int]:
    if symbols.size == 0:
        return 0, 0
    lo = int(np.clip(symbols.min() - 1, -bound, bound))
    hi = int(np.clip(symbols.max() + 1, -bound, bound))
    return lo, hi


def _with_escape(pmf: np.ndarray) -> np.ndarray:
    escape = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
    return np.concatenate([pmf, escape], axis=1)


def _encode(symbols: np.ndarray, lo: int, hi: int, cdfs: np.ndarray, row_of: np.ndarray) -> bytes:
    enc = RangeEncoder()
    enc.encode_bits(_zigzag(lo), _VALUE_BITS)
    enc.encode_bits(_zigzag(hi), _VALUE_BITS)
    escape = hi - lo + 1
    inside = (symbols >= lo) & (symbols <= hi)
    idx = np.where(inside, symbols - lo, escape)
    if inside.all():
        encode_symbols(enc, idx.tolist(), cdfs[row_of])
    else:
        for s, i, r in zip(symbols.tolist(), idx.tolist(), row_of.tolist()):
            row = cdfs[r]
            enc.encode(int(row[i]), int(row[i + 1] - row[i]))
            if i == escape:
                enc.encode_bits(_zigzag(s), _VALUE_BITS)
    return enc.finish()


def _read_window(dec: RangeDecoder, bound: int) -> tuple[int, int]:
    lo = _unzigzag(dec.decode_bits(_VALUE_BITS))
    hi = _unzigzag(dec.decode_bits(_VALUE_BITS))
    if not (-bound <= lo <= hi <= bound):
        raise LatentDecodeError(f"invalid symbol window [{lo}, {hi}]")
    return lo, hi


def _decode(dec: RangeDecoder, lo: int, cdfs: np.ndarray, row_of: np.ndarray) -> np.ndarray:
    rows = cdfs.tolist()
    escape = len(rows[0]) - 2
    out = np.empty(len(row_of), dtype=np.int64)
    for e, r in enumerate(row_of.tolist()):
        i = decode_symbol(dec, rows[r])
        out[e] = _unzigzag(dec.decode_bits(_VALUE_BITS)) if i == escape else lo + i
    dec.check_exhausted()
    return out


def _gaussian_cdfs(lo: int, hi: int, mu: np.ndarray, delta: np.ndarray) -> np.ndarray:
    ks = np.arange(lo, hi + 1, dtype=np.float64)
    pmf = gaussian_bin_probability(ks[None, :], mu.reshape(-1, 1), delta.reshape(-1, 1))
    return quantize_pmf(_with_escape(pmf))


def encode_gaussian(symbols: np.ndarray, mu: np.ndarray, delta: np.ndarray, bound: int = TABLE_BOUND) -> bytes:
    flat = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if mu.size != flat.size or delta.size != flat.size:
        raise ValueError("one (mu, delta) pair is needed per symbol")
    lo, hi = symbol_window(flat, bound)
    cdfs = _gaussian_cdfs(lo, hi, mu, delta)
    return _encode(flat, lo, hi, cdfs, np.arange(flat.size))


def decode_gaussian(data: bytes, mu: np.ndarray, delta: np.ndarray, bound: int = TABLE_BOUND) -> np.ndarray:
    try:
        dec = RangeDecoder(data)
        lo, hi = _read_window(dec, bound)
        cdfs = _gaussian_cdfs(lo, hi, mu, delta)
        out = _decode(dec, lo, cdfs, np.arange(mu.size))
    except RangeCoderError as exc:
        raise LatentDecodeError(str(exc)) from exc
    return out.reshape(mu.shape)


def _prior_cdfs(prior: FactorizedPrior, lo: int, hi: int) -> np.ndarray:
    return quantize_pmf(_with_escape(prior.pmf_table(np.arange(lo, hi + 1))))


def encode_factorized(symbols: np.ndarray, prior: FactorizedPrior, bound: int = TABLE_BOUND) -> bytes:
    sym = np.asarray(symbols, dtype=np.int64)
    flat = sym.reshape(-1)
    lo, hi = symbol_window(flat, bound)
    row_of = np.arange(flat.size) % prior.channels
    return _encode(flat, lo, hi, _prior_cdfs(prior, lo, hi), row_of)


def decode_factorized(data: bytes, shape: tuple, prior: FactorizedPrior, bound: int = TABLE_BOUND) -> np.ndarray:
    if shape[-1] != prior.channels:
        raise ValueError(f"shape {shape} does not match a {prior.channels}-channel prior")
    count = int(np.prod(shape))
    try:
        dec = RangeDecoder(data)
        lo, hi = _read_window(dec, bound)
        out = _decode(dec, lo, _prior_cdfs(prior, lo, hi), np.arange(count) % prior.channels)
    except RangeCoderError as exc:
        raise LatentDecodeError(str(exc)) from exc
    return out.reshape(shape)


def _as_float(model: CodecModel, a: np.ndarray) -> Tensor:
    return Tensor(np.asarray(a, dtype=model.dtype))


@dataclass
class LatentSymbols:
    y_h: np.ndarray
    y_l: np.ndarray
    z_h: np.ndarray
    z_l: np.ndarray


def code_latents(model: CodecModel, y_hat: MFTensor, z_hat: MFTensor, bound: int = TABLE_BOUND) -> list[bytes]:
    """Entropy-code integer-valued latents; returns substreams in ``STREAM_ORDER``."""
    zh = np.asarray(z_hat.hf.data).astype(np.int64)
    zl = np.asarray(z_hat.lf.data).astype(np.int64)
    yh = np.asarray(y_hat.hf.data).astype(np.int64)
    yl = np.asarray(y_hat.lf.data).astype(np.int64)
    s_zh = encode_factorized(zh, model.prior_zh, bound)
    s_zl = encode_factorized(zl, model.prior_zl, bound)
    z_t = MFTensor(_as_float(model, zh), _as_float(model, zl))
    mu_l, delta_l, psi_h = model.hyper_decode(z_t)
    s_yl = encode_gaussian(yl, mu_l.data, delta_l.data, bound)
    hf = model.estimate_hf_params(_as_float(model, yl), psi_h)
    s_yh = encode_gaussian(yh, hf.mu.data, hf.delta.data, bound)
    return [s_zh, s_zl, s_yl, s_yh]


def decode_hf(model: CodecModel, stream: bytes, y_l_hat: np.ndarray, psi_h: Tensor, bound: int = TABLE_BOUND) -> np.ndarray:
    """HF latents can only be decoded once the LF latents are known."""
    hf = model.estimate_hf_params(_as_float(model, y_l_hat), psi_h)
    return decode_gaussian(stream, hf.mu.data, hf.delta.data, bound)


def decode_latents(model: CodecModel, streams: list[bytes], height: int, width: int, bound: int = TABLE_BOUND) -> LatentSymbols:
    """Inverse of :func:`code_latents` for a padded image of ``height`` x ``width``."""
    if len(streams) != len(STREAM_ORDER):
        raise LatentDecodeError(f"expected {len(STREAM_ORDER)} substreams, got {len(streams)}")
    shapes = model.latent_shapes(height, width)
    s_zh, s_zl, s_yl, s_yh = streams
    zh = decode_factorized(s_zh, shapes["z_h"], model.prior_zh, bound)
    zl = decode_factorized(s_zl, shapes["z_l"], model.prior_zl, bound)
    mu_l, delta_l, psi_h = model.hyper_decode(MFTensor(_as_float(model, zh), _as_float(model, zl)))
    yl = decode_gaussian(s_yl, mu_l.data, delta_l.data, bound)
    yh = decode_hf(model, s_yh, yl, psi_h, bound)
    return LatentSymbols(y_h=yh, y_l=yl, z_h=zh, z_l=zl)


def latent_rate_bits(model: CodecModel, y_hat: MFTensor, z_hat: MFTensor, floor: float = P_MIN) -> dict[str, float]:
    """Model-estimated bits per substream for integer latents (probabilities floored at ``floor``)."""
    zh, zl = _as_float(model, z_hat.hf.data), _as_float(model, z_hat.lf.data)
    yl = _as_float(model, y_hat.lf.data)
    mu_l, delta_l, psi_h = model.hyper_decode(MFTensor(zh, zl))
    hf = model.estimate_hf_params(yl, psi_h)

    def gauss(y, mu, delta):
        p = gaussian_bin_probability(np.asarray(y.data, dtype=np.float64), mu.data, delta.data)
        return float(-np.log2(np.maximum(p, floor)).sum())

    return {
        "z_h": float(model.prior_zh.bits(zh, floor).data.astype(np.float64).sum()),
        "z_l": float(model.prior_zl.bits(zl, floor).data.astype(np.float64).sum()),
        "y_l": gauss(y_hat.lf, mu_l, delta_l),
        "y_h": gauss(y_hat.hf, hf.mu, hf.delta),
    }
