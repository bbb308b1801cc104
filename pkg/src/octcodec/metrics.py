"""Color conversion and image quality metrics (PSNR, weighted YUV PSNR, MS-SSIM)."""

from __future__ import annotations

import math
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# BT.601 full range (JFIF). Rows: Y, U (Cb), V (Cr).
BT601 = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
BT709 = np.array(
    [
        [0.2126, 0.7152, 0.0722],
        [-0.114572, -0.385428, 0.5],
        [0.5, -0.454153, -0.045847],
    ]
)
COLOR_MATRICES = {"bt601": BT601, "bt709": BT709}

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_yuv(img: np.ndarray, neutral: float = 128.0, matrix: str = "bt601") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full-range conversion; chroma is centered on ``neutral`` (128 for 8-bit)."""
    m = COLOR_MATRICES[matrix]
    yuv = np.asarray(img, dtype=np.float64) @ m.T
    return yuv[..., 0], yuv[..., 1] + neutral, yuv[..., 2] + neutral


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray, neutral: float = 128.0, matrix: str = "bt601") -> np.ndarray:
    m = COLOR_MATRICES[matrix]
    yuv = np.stack([y, u - neutral, v - neutral], axis=-1)
    return yuv @ np.linalg.inv(m).T


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def combine_yuv_psnr(y_psnr: float, u_psnr: float, v_psnr: float) -> float:
    return (6.0 * y_psnr + u_psnr + v_psnr) / 8.0


def yuv_psnrs(a: np.ndarray, b: np.ndarray, matrix: str = "bt601") -> tuple[float, float, float]:
    pa, pb = rgb_to_yuv(a, matrix=matrix), rgb_to_yuv(b, matrix=matrix)
    return tuple(psnr(x, y) for x, y in zip(pa, pb))


def psnr_yuv(a: np.ndarray, b: np.ndarray, matrix: str = "bt601") -> float:
    """(6 Y_PSNR + U_PSNR + V_PSNR) / 8 for 8-bit RGB images."""
    return combine_yuv_psnr(*yuv_psnrs(a, b, matrix))


def gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def ms_ssim_levels(height: int, width: int, max_levels: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of dyadic scales whose coarsest level still fits the SSIM window."""
    levels = 0
    side = min(height, width)
    while levels < max_levels and side >= SSIM_WINDOW:
        levels += 1
        side //= 2
    return levels


def _ssim_maps(x: Tensor, y: Tensor, taps: np.ndarray, c1: float, c2: float) -> tuple[Tensor, Tensor]:
    filt = lambda t: ad.separable_filter_valid(t, taps)  # noqa: E731
    mu_x, mu_y = filt(x), filt(y)
    mu_xy = mu_x * mu_y
    mu_sq = ad.square(mu_x) + ad.square(mu_y)
    lum = (2.0 * mu_xy + c1) / (mu_sq + c1)
    sxy = filt(x * y) - mu_xy
    s_sq = filt(ad.square(x) + ad.square(y)) - mu_sq
    cs = (2.0 * sxy + c2) / (s_sq + c2)
    return lum, cs


def ms_ssim_tensor(
    x: Tensor,
    y: Tensor,
    data_range: float = 1.0,
    levels: Optional[int] = None,
    floor: float = 1e-6,
) -> Tensor:
    """Differentiable MS-SSIM of (N, H, W) luma batches; returns shape (N,).

    With ``levels`` below five the leading weights are renormalized to sum to one.
    Per-scale terms are floored at ``floor`` before exponentiation.
    """
    if x.shape != y.shape or x.ndim != 3:
        raise ValueError(f"expected matching (N, H, W) inputs, got {x.shape} and {y.shape}")
    max_fit = ms_ssim_levels(x.shape[1], x.shape[2])
    levels = max_fit if levels is None else levels
    if levels < 1 or levels > max_fit:
        raise ValueError(f"{x.shape[1]}x{x.shape[2]} input cannot support {levels} MS-SSIM scales")
    weights = np.array(MS_SSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    taps = gaussian_taps()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    result = None
    for i in range(levels):
        lum, cs = _ssim_maps(x, y, taps, c1, c2)
        if i < levels - 1:
            term = cs.mean(axis=(1, 2))
            x, y = ad.avg_pool2(x), ad.avg_pool2(y)
        else:
            term = (lum * cs).mean(axis=(1, 2))
        factor = ad.power(ad.clamp_min(term, floor), float(weights[i]))
        result = factor if result is None else result * factor
    return result


def ms_ssim(a_luma: np.ndarray, b_luma: np.ndarray, data_range: float = 255.0) -> float:
    """Standard five-scale MS-SSIM of two luma planes (each side >= 176)."""
    a = np.asarray(a_luma, dtype=np.float64)
    b = np.asarray(b_luma, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected two equal 2-D planes, got {a.shape} and {b.shape}")
    need = SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)
    if min(a.shape) < need:
        raise ValueError(f"MS-SSIM needs both sides >= {need}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    out = ms_ssim_tensor(Tensor(a[None]), Tensor(b[None]), data_range, levels=len(MS_SSIM_WEIGHTS), floor=0.0)
    return float(out.data[0])


def ms_ssim_db(value: float) -> float:
    """-10 log10(1 - MS-SSIM); ``inf`` at 1."""
    if value >= 1.0:
        return math.inf
    return -10.0 * math.log10(1.0 - value)


def y_msssim(a_rgb: np.ndarray, b_rgb: np.ndarray, matrix: str = "bt601") -> float:
    ya = rgb_to_yuv(a_rgb, matrix=matrix)[0]
    yb = rgb_to_yuv(b_rgb, matrix=matrix)[0]
    return ms_ssim(ya, yb)


def format_metric(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"
