"""Variable-rate R-D training: per-sample lambda sampling, loss, Adam, patch cropping, logging."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bitstream import pad_image
from .entropy import TRAIN_LIKELIHOOD_FLOOR, QuantMode, quantize
from .metrics import ms_ssim_levels, ms_ssim_tensor, psnr
from .model import CodecConfig, CodecModel, named_config
from .octave import MFTensor
from .params import atomic_write, decode_checkpoint, encode_checkpoint, load_checkpoint

logger = logging.getLogger(__name__)

TABLE_I = {
    "low": (0.000001, 0.000005, 0.00001, 0.00003, 0.00007, 0.0001, 0.0003, 0.0007, 0.001, 0.003, 0.005),
    "middle": (0.0001, 0.0003, 0.0007, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.07, 0.1),
    "high": (0.0001, 0.0003, 0.0007, 0.001, 0.003, 0.005, 0.007, 0.01, 0.03, 0.05, 0.07, 0.1, 0.2, 0.3, 0.4, 0.5),
}
BAND_MODEL_IDS = {"low": 1, "middle": 2, "high": 3, "custom": 0}

# RGB -> Y (BT.601), used for the MS-SSIM term of the training distortion
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LambdaSet:
    band: str
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ValueError("lambda set is empty")
        if any(v <= 0 for v in self.values):
            raise ValueError("lambdas must be positive")

    @classmethod
    def table(cls, band: str) -> "LambdaSet":
        try:
            return cls(band, TABLE_I[band])
        except KeyError:
            raise ValueError(f"unknown band {band!r}; choose from {sorted(TABLE_I)}") from None

    @property
    def span(self) -> tuple[float, float]:
        return min(self.values), max(self.values)


def band_center(lambda_set: LambdaSet) -> float:
    """Midpoint of the set in log10 lambda."""
    lo, hi = lambda_set.span
    return 0.5 * (math.log10(lo) + math.log10(hi))


def sample_lambda(lambda_set: LambdaSet, rng: np.random.Generator, size: Optional[int] = None):
    """Uniform draw(s) from the set."""
    idx = rng.integers(0, len(lambda_set.values), size=size)
    vals = np.asarray(lambda_set.values, dtype=np.float64)
    return float(vals[idx]) if size is None else vals[idx]


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 12
    patch_size: int = 256
    learning_rate: float = 4e-4
    seed: int = 0
    band: str = "middle"
    lambdas: Optional[list] = None
    mse_weight: float = 0.9
    msssim_weight: float = 0.1
    distortion_scale: float = 255.0**2
    model: str = "tiny"
    model_id: Optional[int] = None
    images: str = "images"
    out_dir: str = "runs/train"
    log_every: int = 10
    checkpoint_every: int = 500

    def __post_init__(self):
        for name in ("steps", "batch_size", "patch_size", "log_every", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.mse_weight < 0 or self.msssim_weight < 0:
            raise ValueError("distortion weights must be nonnegative")
        if abs(self.mse_weight + self.msssim_weight - 1.0) > 1e-9:
            raise ValueError("distortion weights must sum to 1")
        if self.distortion_scale <= 0:
            raise ValueError("distortion_scale must be positive")
        self.lambda_set()

    def lambda_set(self) -> LambdaSet:
        if self.lambdas:
            return LambdaSet("custom", tuple(float(v) for v in self.lambdas))
        return LambdaSet.table(self.band)

    def resolved_model_id(self) -> int:
        if self.model_id is not None:
            return int(self.model_id)
        return BAND_MODEL_IDS[self.lambda_set().band]

    @classmethod
    def load(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        data = _parse_config_text(text, str(path))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


PRESETS = {
    "smoke": dict(steps=2000),
    "overfit": dict(steps=10000),
    "mini": dict(steps=100000),
}


def _parse_config_text(text: str, where: str) -> dict:
    if where.endswith((".yaml", ".yml")):
        import yaml

        return yaml.safe_load(text) or {}
    return json.loads(text)


# ---------------------------------------------------------------------------
# loss


def luma(x: Tensor) -> Tensor:
    """(N, H, W, 3) -> (N, H, W) BT.601 luma."""
    return (x @ Tensor(_LUMA.reshape(3, 1).astype(x.dtype))).reshape(x.shape[:3])


def distortion_terms(x: Tensor, x_hat: Tensor, data_range: float = 1.0) -> tuple[Tensor, Optional[Tensor]]:
    """Per-sample RGB MSE and Y MS-SSIM (None if the patch is smaller than one SSIM window)."""
    mse = ad.square(x_hat - x).mean(axis=(1, 2, 3))
    if ms_ssim_levels(x.shape[1], x.shape[2]) == 0:
        return mse, None
    return mse, ms_ssim_tensor(luma(x), luma(x_hat), data_range)


def distortion(
    x,
    x_hat,
    mse_weight: float = 0.9,
    msssim_weight: float = 0.1,
) -> np.ndarray:
    """D = 0.9 RGB_MSE + 0.1 (1 - Y_MS-SSIM) per image of an (N, H, W, 3) batch in [0, 1)."""
    xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    yt = x_hat if isinstance(x_hat, Tensor) else Tensor(np.asarray(x_hat, dtype=np.float64))
    if xt.ndim == 3:
        xt, yt = xt.reshape((1,) + xt.shape), yt.reshape((1,) + yt.shape)
    mse, ms = distortion_terms(xt, yt)
    d = mse_weight * mse.data
    if ms is not None:
        d = d + msssim_weight * (1.0 - ms.data)
    return d


def combine_distortion(mse: float, msssim: float, mse_weight: float = 0.9, msssim_weight: float = 0.1) -> float:
    return mse_weight * mse + msssim_weight * (1.0 - msssim)


@dataclass
class RDResult:
    loss: Tensor
    bits: np.ndarray
    bpp: np.ndarray
    distortion: np.ndarray
    mse: np.ndarray
    msssim: np.ndarray
    lambdas: np.ndarray
    x_hat: np.ndarray


def _pad_batch(batch: np.ndarray, granule: int) -> np.ndarray:
    if batch.shape[1] % granule == 0 and batch.shape[2] % granule == 0:
        return batch
    return np.stack([pad_image(img, granule)[0] for img in batch])


def forward_rd(
    model: CodecModel,
    batch: np.ndarray,
    lambdas,
    rng: Optional[np.random.Generator] = None,
    mode: Union[QuantMode, str] = QuantMode.NOISE,
    mse_weight: float = 0.9,
    msssim_weight: float = 0.1,
    distortion_scale: float = 255.0**2,
    likelihood_floor: float = TRAIN_LIKELIHOOD_FLOOR,
) -> RDResult:
    """One R-D evaluation of an (N, H, W, 3) batch in [0, 1).

    ``loss = mean_i(bpp_i + lambda_i * distortion_scale * D_i)`` where rate is
    measured over the original (unpadded) pixels.
    """
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise ValueError(f"expected an (N, H, W, 3) batch, got {batch.shape}")
    n, h, w, _ = batch.shape
    lam = np.broadcast_to(np.asarray(lambdas, dtype=np.float64), (n,)).copy()
    dtype = model.dtype
    x = Tensor(_pad_batch(batch, model.config.granule).astype(dtype))
    lam_t = Tensor(lam.astype(dtype))
    mode = QuantMode(mode)

    y = model.encode_analysis(x, lam_t)
    z = model.hyper_encode(y)
    z_q = MFTensor(quantize(z.hf, mode, rng), quantize(z.lf, mode, rng))
    y_q = MFTensor(quantize(y.hf, mode, rng), quantize(y.lf, mode, rng))
    mu_l, delta_l, psi_h = model.hyper_decode(z_q)
    hf = model.estimate_hf_params(y_q.lf, psi_h)

    def per_sample(t: Tensor) -> Tensor:
        return t.sum(axis=(1, 2, 3))

    bits = (
        per_sample(ad.gaussian_bits(y_q.hf, hf.mu, hf.delta, likelihood_floor))
        + per_sample(ad.gaussian_bits(y_q.lf, mu_l, delta_l, likelihood_floor))
        + per_sample(model.prior_zh.bits(z_q.hf, likelihood_floor))
        + per_sample(model.prior_zl.bits(z_q.lf, likelihood_floor))
    )
    bpp = bits * (1.0 / (h * w))

    x_hat = model.decode_synthesis(y_q, lam_t)
    if x_hat.shape[1:3] != (h, w):
        x_hat = x_hat[:, :h, :w, :]
    x_orig = Tensor(batch.astype(dtype))
    mse, ms = distortion_terms(x_orig, x_hat)
    d = mse * mse_weight
    if ms is not None:
        d = d + (1.0 - ms) * msssim_weight
    loss = (bpp + Tensor((lam * distortion_scale).astype(dtype)) * d).mean()
    return RDResult(
        loss=loss,
        bits=bits.data.astype(np.float64),
        bpp=bpp.data.astype(np.float64),
        distortion=d.data.astype(np.float64),
        mse=mse.data.astype(np.float64),
        msssim=np.ones(n) if ms is None else ms.data.astype(np.float64),
        lambdas=lam,
        x_hat=x_hat.data,
    )


def rd_loss(model: CodecModel, batch: np.ndarray, lambdas, rng: np.random.Generator, **kwargs) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training loss in noise mode; returns ``(loss, rate_bits, distortion)`` per the batch."""
    res = forward_rd(model, batch, lambdas, rng, QuantMode.NOISE, **kwargs)
    if not np.isfinite(res.loss.data):
        raise FloatingPointError(f"non-finite loss {res.loss.data} (bits={res.bits}, D={res.distortion})")
    return res.loss, res.bits, res.distortion


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, named_params: dict[str, Tensor], lr: float = 4e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = named_params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named_params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named_params.items()}

    def step(self) -> None:
        self.t += 1
        if self.lr == 0:
            return
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam_m/{k}"] = self.m[k]
            out[f"adam_v/{k}"] = self.v[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k, p in self.params.items():
            self.m[k] = np.array(tensors[f"adam_m/{k}"], dtype=p.data.dtype)
            self.v[k] = np.array(tensors[f"adam_v/{k}"], dtype=p.data.dtype)
        self.t = t


@dataclass
class StepMetrics:
    step: int
    loss: float
    bpp: float
    rgb_mse: float
    msssim: float
    psnr: float
    lambdas: np.ndarray
    skipped: bool = False


def train_step(
    model: CodecModel,
    optimizer: Adam,
    batch: np.ndarray,
    lambdas: np.ndarray,
    rng: np.random.Generator,
    **loss_kwargs,
) -> StepMetrics:
    """Forward, backward and one Adam update. Non-finite losses or gradients skip the update."""
    model.store.zero_grad()
    res = forward_rd(model, batch, lambdas, rng, QuantMode.NOISE, **loss_kwargs)
    loss = float(res.loss.data)
    mse = float(res.mse.mean())
    metrics = StepMetrics(
        step=optimizer.t + 1,
        loss=loss,
        bpp=float(res.bpp.mean()),
        rgb_mse=mse,
        msssim=float(res.msssim.mean()),
        psnr=math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse),
        lambdas=res.lambdas,
    )
    if not math.isfinite(loss):
        logger.warning("step %d: non-finite loss %s, update skipped", metrics.step, loss)
        metrics.skipped = True
        optimizer.t += 1
        return metrics
    res.loss.backward()
    grads = [p.grad for p in model.store.tensors() if p.grad is not None]
    if any(not np.all(np.isfinite(g)) for g in grads):
        logger.warning("step %d: non-finite gradient, update skipped", metrics.step)
        metrics.skipped = True
        optimizer.t += 1
        return metrics
    if all(not np.any(g) for g in grads):
        metrics.skipped = True
        optimizer.t += 1
        return metrics
    optimizer.step()
    return metrics


# ---------------------------------------------------------------------------
# data


def crop_patches(images: Sequence[np.ndarray], patch_size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random ``patch_size`` crops (no other augmentation); undersized images are skipped."""
    usable = []
    for i, img in enumerate(images):
        if img.shape[0] < patch_size or img.shape[1] < patch_size:
            logger.warning("image %d (%dx%d) is smaller than the %d patch; skipped", i, img.shape[1], img.shape[0], patch_size)
            continue
        usable.append(img)
    if not usable:
        raise ValueError(f"no image is at least {patch_size}x{patch_size}")
    out = []
    for _ in range(batch_size):
        img = usable[int(rng.integers(len(usable)))]
        top = int(rng.integers(img.shape[0] - patch_size + 1))
        left = int(rng.integers(img.shape[1] - patch_size + 1))
        out.append(img[top : top + patch_size, left : left + patch_size])
    return np.stack(out)


def to_unit(img_u8: np.ndarray) -> np.ndarray:
    """8-bit RGB to [0, 1) by dividing by 256."""
    return np.asarray(img_u8, dtype=np.float64) / 256.0


# ---------------------------------------------------------------------------
# loop


LOG_FIELDS = ("step", "loss", "bpp", "rgb_mse", "msssim", "lambda_histogram")


def checkpoint_meta(model: CodecModel, model_id: int, lambda_set: LambdaSet, **extra) -> dict:
    meta = {
        "config": model.config.to_dict(),
        "model_id": model_id,
        "band": lambda_set.band,
        "lambdas": list(lambda_set.values),
        "lambda_span": list(lambda_set.span),
    }
    meta.update(extra)
    return meta


class Trainer:
    """Owns model, optimizer and RNG; resumable from its own checkpoints."""

    def __init__(self, config: TrainConfig, images: Sequence[np.ndarray], model: Optional[CodecModel] = None):
        self.config = config
        self.images = [to_unit(im) if im.dtype == np.uint8 else im for im in images]
        self.lambda_set = config.lambda_set()
        if model is None:
            cfg = named_config(config.model)
            cfg.lambda_center = band_center(self.lambda_set)
            model = CodecModel(cfg, seed=config.seed)
        self.model = model
        self.optimizer = Adam(dict(self.model.store.items()), lr=config.learning_rate)
        self.rng = np.random.default_rng(config.seed)
        self.history: list[StepMetrics] = []

    @property
    def step(self) -> int:
        return self.optimizer.t

    def loss_kwargs(self) -> dict:
        c = self.config
        return dict(mse_weight=c.mse_weight, msssim_weight=c.msssim_weight, distortion_scale=c.distortion_scale)

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.config
        batch = crop_patches(self.images, c.patch_size, c.batch_size, self.rng)
        lambdas = sample_lambda(self.lambda_set, self.rng, size=c.batch_size)
        return batch, lambdas

    def run_step(self) -> StepMetrics:
        batch, lambdas = self.next_batch()
        m = train_step(self.model, self.optimizer, batch, lambdas, self.rng, **self.loss_kwargs())
        self.history.append(m)
        return m

    def checkpoint_bytes(self) -> bytes:
        tensors = self.model.store.state()
        tensors.update(self.optimizer.state())
        meta = checkpoint_meta(
            self.model,
            self.config.resolved_model_id(),
            self.lambda_set,
            step=self.optimizer.t,
            rng_state=self.rng.bit_generator.state,
            train_config=asdict(self.config),
        )
        return encode_checkpoint(tensors, meta)

    def save(self, path) -> None:
        atomic_write(path, self.checkpoint_bytes())

    def restore(self, path) -> None:
        tensors, meta = load_checkpoint(path)
        self.restore_from(tensors, meta)

    def restore_from(self, tensors: dict, meta: dict) -> None:
        params = {k: v for k, v in tensors.items() if not k.startswith("adam_")}
        self.model.store.load_state(params)
        if "step" in meta:
            self.optimizer.load_state(tensors, int(meta["step"]))
        if "rng_state" in meta:
            self.rng.bit_generator.state = meta["rng_state"]

    def train(self, steps: Optional[int] = None, out_dir=None, resume: bool = False) -> list[StepMetrics]:
        c = self.config
        steps = c.steps if steps is None else steps
        out = Path(out_dir) if out_dir is not None else None
        log_rows: list[StepMetrics] = []
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            latest = out / "latest.ckpt"
            if resume and latest.exists():
                self.restore(latest)
                logger.info("resumed from %s at step %d", latest, self.step)
        while self.step < steps:
            m = self.run_step()
            log_rows.append(m)
            if out is not None and (self.step % c.log_every == 0 or self.step == steps):
                _append_log(out / "train_log.csv", log_rows)
                log_rows = []
            if out is not None and (self.step % c.checkpoint_every == 0 or self.step == steps):
                self.save(out / "latest.ckpt")
        return self.history


def _append_log(path: Path, rows: list[StepMetrics]) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_FIELDS)
        for m in rows:
            hist = Counter(float(v) for v in m.lambdas)
            hist_s = ";".join(f"{k:g}:{hist[k]}" for k in sorted(hist))
            w.writerow([m.step, f"{m.loss:.8g}", f"{m.bpp:.8g}", f"{m.rgb_mse:.8g}", f"{m.msssim:.8g}", hist_s])


def windowed_means(values: Sequence[float], window: int) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return [float(v[i * window : (i + 1) * window].mean()) for i in range(n)]


def evaluate_rd(model: CodecModel, image: np.ndarray, lam: float) -> RDResult:
    """Round-mode R-D estimate for one image in [0, 1)."""
    return forward_rd(model, image[None], lam, None, QuantMode.ROUND, likelihood_floor=2.0**-16)


def reconstruction_psnr(image: np.ndarray, x_hat: np.ndarray) -> float:
    """RGB PSNR of a [0, 1) reconstruction after 8-bit quantization."""
    a = np.clip(np.floor(image * 256.0 + 0.5), 0, 255)
    b = np.clip(np.floor(np.asarray(x_hat, dtype=np.float64) * 256.0 + 0.5), 0, 255)
    return psnr(a, b)
