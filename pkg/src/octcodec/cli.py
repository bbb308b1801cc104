"""Command line interface: ``octcodec encode|decode|train|eval|rate-control|rd-curve``."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from .bitstream import FormatError, deserialize, serialize
from .codec import (
    IMAGE_SUFFIXES,
    LambdaOutOfBandError,
    ModelMismatchError,
    compress,
    decompress,
    encode_image_bytes,
    load_model,
    read_image,
)
from .coding import LatentDecodeError
from .metrics import format_metric, ms_ssim_db, psnr_yuv, y_msssim, yuv_psnrs
from .params import CheckpointError, atomic_write
from .rangecoder import RangeCoderError
from .ratecontrol import TargetOutOfRangeError, rate_control

logger = logging.getLogger("octcodec")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_MODEL = 5

METRIC_FIELDS = ("image_id", "lambda", "bpp", "y_psnr", "u_psnr", "v_psnr", "yuv_psnr", "y_msssim", "y_msssim_db")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fail(message: str, code: int):
    raise CommandError(message, code)


def _load(path):
    try:
        return load_model(path)
    except OSError as exc:
        _fail(f"cannot read model {path}: {exc}", EXIT_IO)
    except CheckpointError as exc:
        _fail(f"{path}: {exc}", EXIT_FORMAT)


def _read(path):
    try:
        return read_image(path)
    except ValueError as exc:
        _fail(str(exc), EXIT_USAGE)
    except OSError as exc:
        _fail(f"cannot read image {path}: {exc}", EXIT_IO)


def _write(path, payload: bytes) -> None:
    try:
        atomic_write(path, payload)
    except OSError as exc:
        _fail(f"cannot write {path}: {exc}", EXIT_IO)


def _set_threads(threads: int) -> None:
    # BLAS pools are sized at import; this only helps child processes and libraries that read it late
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(threads)


def _encode(img, loaded, lam) -> bytes:
    try:
        return serialize(compress(img, loaded, lam))
    except LambdaOutOfBandError as exc:
        _fail(str(exc), EXIT_MODEL)
    except ValueError as exc:
        _fail(str(exc), EXIT_USAGE)


def _decode(blob: bytes, loaded):
    try:
        c = deserialize(blob)
        return c, decompress(c, loaded)
    except ModelMismatchError as exc:
        _fail(str(exc), EXIT_MODEL)
    except (FormatError, LatentDecodeError, RangeCoderError) as exc:
        _fail(f"corrupt stream: {exc}", EXIT_FORMAT)


def image_metrics(ref: np.ndarray, rec: np.ndarray) -> dict:
    y, u, v = yuv_psnrs(ref, rec)
    row = {"y_psnr": y, "u_psnr": u, "v_psnr": v, "yuv_psnr": psnr_yuv(ref, rec)}
    try:
        ms = y_msssim(ref, rec)
        row.update(y_msssim=ms, y_msssim_db=ms_ssim_db(ms))
    except ValueError:
        logger.warning("image is smaller than 176x176; MS-SSIM left as nan")
        row.update(y_msssim=math.nan, y_msssim_db=math.nan)
    return row


def _format_row(row: dict) -> list[str]:
    out = []
    for k in METRIC_FIELDS:
        v = row[k]
        if isinstance(v, str):
            out.append(v)
        elif k == "lambda":
            out.append(f"{v:.6g}")
        elif k == "bpp":
            # full precision so the column can be checked against container sizes
            out.append(f"{v:.12g}")
        elif isinstance(v, float) and math.isnan(v):
            out.append("nan")
        else:
            out.append(format_metric(float(v)))
    return out


def _csv_bytes(rows: list[dict]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow(_format_row(r))
    return buf.getvalue().encode()


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CommandError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.code)


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose: int) -> None:
    """Variable-rate multi-frequency learned image codec."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


model_opt = click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False), help="Checkpoint file.")
out_opt = click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Output file.")
threads_opt = click.option("--threads", default=1, show_default=True, type=click.IntRange(min=1))


@main.command()
@click.argument("image", type=click.Path(dir_okay=False))
@model_opt
@click.option("--lambda", "lam", required=True, type=float, help="Rate-distortion tradeoff.")
@out_opt
@threads_opt
def encode(image, model_path, lam, out_path, threads):
    """Compress a PNG/PPM image into a container."""
    _set_threads(threads)
    loaded = _load(model_path)
    img = _read(image)
    blob = _encode(img, loaded, lam)
    _write(out_path, blob)
    h, w = img.shape[:2]
    click.echo(f"bytes={len(blob)} bpp={8.0 * len(blob) / (h * w):.6f} lambda={lam:g}")


@main.command()
@click.argument("stream", type=click.Path(dir_okay=False))
@model_opt
@out_opt
@threads_opt
def decode(stream, model_path, out_path, threads):
    """Reconstruct an image from a container."""
    _set_threads(threads)
    loaded = _load(model_path)
    try:
        blob = Path(stream).read_bytes()
    except OSError as exc:
        _fail(f"cannot read {stream}: {exc}", EXIT_IO)
    c, img = _decode(blob, loaded)
    _write(out_path, encode_image_bytes(img, Path(out_path).suffix))
    click.echo(f"width={c.header.width} height={c.header.height} lambda={c.header.lam:g}")


@main.command("rate-control")
@click.argument("image", type=click.Path(dir_okay=False))
@model_opt
@click.option("--target-bpp", required=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--tolerance", default=0.01, show_default=True, type=click.FloatRange(min=0, min_open=True))
@out_opt
@threads_opt
def rate_control_cmd(image, model_path, target_bpp, tolerance, out_path, threads):
    """Search λ so the container hits a target bitrate."""
    _set_threads(threads)
    loaded = _load(model_path)
    img = _read(image)
    try:
        res = rate_control(img, loaded, target_bpp, tolerance)
    except TargetOutOfRangeError as exc:
        _fail(str(exc), EXIT_USAGE)
    _write(out_path, res.blob)
    click.echo(
        f"lambda={res.lam:g} bpp={res.bpp:.6f} target={target_bpp:g} "
        f"deviation={100 * res.deviation:.3f}% probes={len(res.probes)} converged={res.converged}"
    )
    if not res.converged:
        click.echo("warning: tolerance not met; wrote the closest probe", err=True)


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _eval_one(path: Path, loaded, lambdas) -> list[dict]:
    img = read_image(path)
    h, w = img.shape[:2]
    rows = []
    for lam in lambdas:
        blob = serialize(compress(img, loaded, lam))
        rec = decompress(deserialize(blob), loaded)
        row = {"image_id": path.stem, "lambda": lam, "bpp": 8.0 * len(blob) / (h * w)}
        row.update(image_metrics(img, rec))
        rows.append(row)
    return rows


@main.command("eval")
@click.argument("image_dir", type=click.Path(file_okay=False))
@model_opt
@click.option("--lambda", "lambdas", required=True, multiple=True, type=float, help="Repeatable.")
@out_opt
@threads_opt
def eval_cmd(image_dir, model_path, lambdas, out_path, threads):
    """Encode/decode every image at each λ and write the metrics CSV."""
    _set_threads(threads)
    loaded = _load(model_path)
    for lam in lambdas:
        try:
            loaded.check_lambda(lam)
        except LambdaOutOfBandError as exc:
            _fail(str(exc), EXIT_MODEL)
    directory = Path(image_dir)
    if not directory.is_dir():
        _fail(f"{image_dir} is not a directory", EXIT_IO)
    files = _image_files(directory)
    if not files:
        _fail(f"no PNG/PPM images in {image_dir}", EXIT_IO)

    def job(path):
        try:
            return _eval_one(path, loaded, lambdas)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", path.name, exc)
            return None

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(job, files))
    rows = [r for res in results if res for r in res]
    if not rows:
        _fail("every image failed", EXIT_IO)
    _write(out_path, _csv_bytes(rows))
    click.echo(f"rows={len(rows)} images={sum(1 for r in results if r)} skipped={sum(1 for r in results if not r)}")


@main.command("rd-curve")
@click.argument("image", type=click.Path(dir_okay=False))
@model_opt
@click.option("--lambda", "lambdas", multiple=True, type=float, help="Repeatable; default spans the model band.")
@click.option("--points", default=8, show_default=True, type=click.IntRange(min=2), help="Log-spaced λ count when --lambda is absent.")
@out_opt
@click.option("--gnuplot", "gnuplot_path", type=click.Path(dir_okay=False), help="Also write whitespace-separated 'bpp yuv_psnr' data.")
@threads_opt
def rd_curve(image, model_path, lambdas, points, out_path, gnuplot_path, threads):
    """Emit one image's rate-distortion curve as CSV."""
    _set_threads(threads)
    loaded = _load(model_path)
    img = _read(image)
    if not lambdas:
        lo, hi = loaded.lambda_span
        lambdas = tuple(float(v) for v in np.unique(np.round(np.geomspace(lo, hi, points) * 1e6) / 1e6))
    for lam in lambdas:
        try:
            loaded.check_lambda(lam)
        except LambdaOutOfBandError as exc:
            _fail(str(exc), EXIT_MODEL)
    h, w = img.shape[:2]
    rows = []
    for lam in sorted(lambdas):
        blob = _encode(img, loaded, lam)
        _, rec = _decode(blob, loaded)
        row = {"image_id": Path(image).stem, "lambda": lam, "bpp": 8.0 * len(blob) / (h * w)}
        row.update(image_metrics(img, rec))
        rows.append(row)
    _write(out_path, _csv_bytes(rows))
    if gnuplot_path:
        lines = ["# bpp yuv_psnr lambda"] + [f"{r['bpp']:.6f} {format_metric(r['yuv_psnr'])} {r['lambda']:.6g}" for r in rows]
        _write(gnuplot_path, ("\n".join(lines) + "\n").encode())
    click.echo(f"points={len(rows)}")


@main.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON or YAML training config.")
@click.option("--preset", type=click.Choice(["smoke", "overfit", "mini"]), help="Step-count preset (overridden by --config).")
@click.option("--images", "image_dir", type=click.Path(file_okay=False), help="Overrides the config's image directory.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Overrides the config's output directory.")
@click.option("--steps", type=click.IntRange(min=1), help="Overrides the configured step count.")
@click.option("--seed", type=int, help="Overrides the configured seed.")
@click.option("--resume/--no-resume", default=True, show_default=True)
@threads_opt
def train(config_path, preset, image_dir, out_dir, steps, seed, resume, threads):
    """Train a variable-rate model; resumes from OUT/latest.ckpt when present."""
    from .training import PRESETS, TrainConfig, Trainer

    _set_threads(threads)
    overrides = {k: v for k, v in (("steps", steps), ("seed", seed)) if v is not None}
    if image_dir:
        overrides["images"] = image_dir
    if out_dir:
        overrides["out_dir"] = out_dir
    try:
        if config_path:
            base = TrainConfig.load(config_path)
            data = {**base.__dict__, **overrides}
        else:
            data = {**PRESETS[preset or "smoke"], **overrides}
        config = TrainConfig(**data)
    except OSError as exc:
        _fail(f"cannot read config: {exc}", EXIT_IO)
    except (ValueError, TypeError) as exc:
        _fail(f"invalid training config: {exc}", EXIT_USAGE)
    directory = Path(config.images)
    if not directory.is_dir():
        _fail(f"training image directory {directory} does not exist", EXIT_IO)
    files = _image_files(directory)
    images = []
    for p in files:
        try:
            images.append(read_image(p))
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", p.name, exc)
    usable = [im for im in images if min(im.shape[:2]) >= config.patch_size]
    if not usable:
        _fail(f"no training image in {directory} is at least {config.patch_size}x{config.patch_size}", EXIT_USAGE)
    trainer = Trainer(config, usable)
    history = trainer.train(out_dir=config.out_dir, resume=resume)
    last = history[-1] if history else None
    msg = f"step={trainer.step} checkpoint={Path(config.out_dir) / 'latest.ckpt'}"
    if last is not None:
        msg += f" loss={last.loss:.6g} bpp={last.bpp:.4f} psnr={last.psnr:.2f}"
    click.echo(msg)


if __name__ == "__main__":
    main()
