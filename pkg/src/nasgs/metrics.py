"""Image quality metrics: PSNR and single-scale SSIM (with analytic gradient)."""

import logging
import math
from collections.abc import Iterable

import numpy as np
from scipy import signal

from .errors import ImageTooSmallError, ShapeMismatchError
from .models import ImageScore, MetricReport

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError("b", a.shape, b.shape)
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """
    Peak signal-to-noise ratio for images in [0, 1].

    Returns:
        10 log10(1 / MSE) in dB; +inf for identical images

    Raises:
        ShapeMismatchError: If shapes differ

    Examples:
        >>> psnr(np.zeros((4, 4)), np.full((4, 4), 0.1))
        20.0
    """
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    taps = np.exp(-(x**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = signal.convolve2d(img, taps[None, :], mode='valid')
    return signal.convolve2d(out, taps[:, None], mode='valid')


def _filter_full(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = signal.convolve2d(img, taps[None, :], mode='full')
    return signal.convolve2d(out, taps[:, None], mode='full')


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> dict[str, np.ndarray]:
    if min(a.shape) < SSIM_WINDOW:
        raise ImageTooSmallError(a.shape, SSIM_WINDOW)
    taps = gaussian_window_1d()
    mu_a = _filter_valid(a, taps)
    mu_b = _filter_valid(b, taps)
    e_aa = _filter_valid(a * a, taps)
    e_bb = _filter_valid(b * b, taps)
    e_ab = _filter_valid(a * b, taps)
    A1 = 2.0 * mu_a * mu_b + SSIM_C1
    A2 = 2.0 * (e_ab - mu_a * mu_b) + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = (e_aa - mu_a**2) + (e_bb - mu_b**2) + SSIM_C2
    return {
        "taps": taps,
        "mu_a": mu_a,
        "mu_b": mu_b,
        "A1": A1,
        "A2": A2,
        "B1": B1,
        "B2": B2,
        "map": (A1 * A2) / (B1 * B2),
    }


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
    C2 = 0.03^2 on dynamic range 1, averaged over valid window positions.

    Raises:
        ShapeMismatchError: If shapes differ
        ImageTooSmallError: If either side is shorter than 11 pixels
    """
    a, b = _check_pair(a, b)
    return float(np.mean(_ssim_terms(a, b)["map"]))


def ssim_with_gradient(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """
    SSIM and its gradient with respect to the first image.

    Returns:
        (ssim value, dSSIM/da with the shape of a)
    """
    a, b = _check_pair(a, b)
    t = _ssim_terms(a, b)
    S = t["map"]
    scale = 1.0 / S.size
    mu_a, mu_b = t["mu_a"], t["mu_b"]
    A1, A2, B1, B2 = t["A1"], t["A2"], t["B1"], t["B2"]
    d_mu = S * ((2.0 * mu_b / A1 - 2.0 * mu_a / B1) + (2.0 * mu_a / B2 - 2.0 * mu_b / A2)) * scale
    d_eaa = -S / B2 * scale
    d_eab = 2.0 * S / A2 * scale
    taps = t["taps"]
    grad = _filter_full(d_mu, taps) + 2.0 * a * _filter_full(d_eaa, taps) + b * _filter_full(d_eab, taps)
    return float(np.mean(S)), grad


def evaluate_images(pairs: Iterable[tuple[int, np.ndarray, np.ndarray]]) -> MetricReport:
    """
    Score rendered images against references.

    Args:
        pairs: (frame index, rendered, reference) triples

    Returns:
        MetricReport with per-image scores and their means
    """
    scores = [
        ImageScore(index=i, psnr=psnr(r, ref), ssim=min(ssim(r, ref), 1.0)) for i, r, ref in pairs
    ]
    if not scores:
        return MetricReport(mean_psnr=0.0, mean_ssim=0.0, per_image=[])
    mean_psnr = float(np.mean([s.psnr for s in scores]))
    mean_ssim = float(np.mean([s.ssim for s in scores]))
    logger.info(f"Evaluated {len(scores)} images: PSNR {mean_psnr:.3f} dB, SSIM {mean_ssim:.4f}")
    return MetricReport(mean_psnr=mean_psnr, mean_ssim=min(mean_ssim, 1.0), per_image=scores)
