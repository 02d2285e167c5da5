"""Image quality metrics: PSNR, RMSE, SSIM and line profiles."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.signal import convolve2d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    ref = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    return x, ref


def rmse(x, ref) -> float:
    x, ref = _pair(x, ref)
    return float(np.sqrt(np.mean((x - ref) ** 2)))


def psnr(x, ref) -> float:
    """PSNR in dB with the peak taken as ``max(ref)``; ``inf`` when equal."""
    x, ref = _pair(x, ref)
    err = rmse(x, ref)
    if err == 0.0:
        return math.inf
    return float(20.0 * np.log10(ref.max() / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - 0.5 * (size - 1)
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, ref, data_range: float | None = None) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows.

    The dynamic range defaults to ``max(ref) - min(ref)``, which makes the
    score asymmetric in its arguments.
    """
    x, ref = _pair(x, ref)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    w = gaussian_window()

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(ref * ref) - mu_y * mu_y
    sxy = filt(x * ref) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def line_profile(x, index: int, axis: int = 0) -> np.ndarray:
    """Pixel values along row ``index`` (axis 0) or column ``index`` (axis 1)."""
    x = np.asarray(getattr(x, "values", x))
    if axis not in (0, 1):
        raise ValueError("axis must be 0 (row) or 1 (column)")
    if not 0 <= index < x.shape[axis]:
        raise IndexError(f"index {index} out of range for axis {axis} of size {x.shape[axis]}")
    return x[index, :].copy() if axis == 0 else x[:, index].copy()


def to_hu(values, mu_water: float) -> np.ndarray:
    """Hounsfield units with air (mu = 0) at -1000 HU."""
    return 1000.0 * (np.asarray(values) - mu_water) / mu_water


@dataclass
class MetricReport:
    psnr_db: float
    rmse: float
    ssim: float
    rmse_hu: float | None = None
    psnr_db_fov: float | None = None
    rmse_fov: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate(x, ref, mask: np.ndarray | None = None,
             mu_water: float | None = None) -> MetricReport:
    """Full-image metrics, plus FOV-masked PSNR/RMSE when ``mask`` is given."""
    x, ref = _pair(x, ref)
    rep = MetricReport(psnr(x, ref), rmse(x, ref), ssim(x, ref))
    if mu_water is not None:
        rep.rmse_hu = 1000.0 * rep.rmse / mu_water
    if mask is not None:
        err = float(np.sqrt(np.mean((x[mask] - ref[mask]) ** 2)))
        rep.rmse_fov = err
        rep.psnr_db_fov = math.inf if err == 0 else float(20 * np.log10(ref.max() / err))
    return rep
