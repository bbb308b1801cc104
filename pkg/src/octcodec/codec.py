"""End-to-end image compression: 8-bit RGB in, container out, and back."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .bitstream import Container, Header, crop_image, pad_image, quantize_lambda, serialize
from .coding import code_latents, decode_latents
from .entropy import QuantMode, quantize
from .model import CodecConfig, CodecModel
from .octave import MFTensor
from .params import CheckpointError, load_checkpoint

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")


class ModelMismatchError(ValueError):
    """The stream was produced by a different model than the one supplied."""


class LambdaOutOfBandError(ValueError):
    pass


@dataclass
class LoadedModel:
    model: CodecModel
    model_id: int
    lambda_span: tuple[float, float]
    band: str = "custom"

    @property
    def alpha_numerator(self) -> int:
        return int(round(self.model.config.alpha * 256))

    def check_lambda(self, lam: float) -> None:
        lo, hi = self.lambda_span
        # the header carries lambda at 1e-6 resolution; compare on that grid
        q = round(lam * 1e6)
        if not (round(lo * 1e6) <= q <= round(hi * 1e6)):
            raise LambdaOutOfBandError(
                f"lambda {lam:g} is outside this model's band [{lo:g}, {hi:g}] ({self.band}); "
                "use a checkpoint trained for that range"
            )


def load_model(path) -> LoadedModel:
    tensors, meta = load_checkpoint(path)
    try:
        config = CodecConfig.from_dict(meta["config"])
        model_id = int(meta["model_id"])
        span = tuple(float(v) for v in meta["lambda_span"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint metadata is incomplete: {exc}") from exc
    model = CodecModel(config)
    model.store.load_state({k: v for k, v in tensors.items() if not k.startswith("adam_")})
    return LoadedModel(model, model_id, span, meta.get("band", "custom"))


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"{path}: only PNG and PPM images are supported")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def encode_image_bytes(img: np.ndarray, suffix: str = ".png") -> bytes:
    import io

    fmt = "PPM" if suffix.lower() in (".ppm", ".pnm") else "PNG"
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8), "RGB").save(buf, format=fmt)
    return buf.getvalue()


def _check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 uint8 image, got {img.dtype} {img.shape}")
    return img


def compress(img: np.ndarray, loaded: LoadedModel, lam: float) -> Container:
    img = _check_rgb(img)
    loaded.check_lambda(lam)
    lambda_q = quantize_lambda(lam)
    model = loaded.model
    lam_t = Tensor(np.array([lambda_q / 1e6], dtype=model.dtype))
    padded, (h, w) = pad_image(img, model.config.granule)
    x = Tensor((padded.astype(np.float64) / 256.0)[None].astype(model.dtype))
    y = model.encode_analysis(x, lam_t)
    z = model.hyper_encode(y)
    y_hat = MFTensor(quantize(y.hf, QuantMode.ROUND), quantize(y.lf, QuantMode.ROUND))
    z_hat = MFTensor(quantize(z.hf, QuantMode.ROUND), quantize(z.lf, QuantMode.ROUND))
    streams = code_latents(model, y_hat, z_hat)
    header = Header(
        model_id=loaded.model_id,
        width=w,
        height=h,
        lambda_q=lambda_q,
        n=model.config.n,
        alpha_numerator=loaded.alpha_numerator,
    )
    return Container(header, tuple(streams))


def check_compatible(c: Container, loaded: LoadedModel) -> None:
    h = c.header
    if h.model_id != loaded.model_id:
        raise ModelMismatchError(f"stream needs model id {h.model_id}, checkpoint has {loaded.model_id}")
    if h.n != loaded.model.config.n or h.alpha_numerator != loaded.alpha_numerator:
        raise ModelMismatchError(
            f"stream was coded with N={h.n}, alpha={h.alpha_numerator}/256; "
            f"checkpoint has N={loaded.model.config.n}, alpha={loaded.alpha_numerator}/256"
        )


def decompress(c: Container, loaded: LoadedModel) -> np.ndarray:
    check_compatible(c, loaded)
    model = loaded.model
    hdr = c.header
    g = model.config.granule
    ph, pw = -(-hdr.height // g) * g, -(-hdr.width // g) * g
    sym = decode_latents(model, list(c.substreams), ph, pw)
    y_hat = MFTensor(Tensor(sym.y_h.astype(model.dtype)), Tensor(sym.y_l.astype(model.dtype)))
    lam_t = Tensor(np.array([hdr.lam], dtype=model.dtype))
    x_hat = model.decode_synthesis(y_hat, lam_t).data[0]
    out = np.clip(np.floor(x_hat.astype(np.float64) * 256.0 + 0.5), 0, 255).astype(np.uint8)
    return crop_image(out, (hdr.height, hdr.width))


def container_bpp(c: Container, height: Optional[int] = None, width: Optional[int] = None) -> float:
    """Bits of the whole serialized container per original pixel."""
    h = c.header.height if height is None else height
    w = c.header.width if width is None else width
    return 8.0 * len(serialize(c)) / (h * w)
