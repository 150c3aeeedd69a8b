"""
Image-quality metrics: PSNR, SSIM and MS-SSIM.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2 and C2 = (0.03 L)^2. When an image
side is smaller than the window, the window shrinks to the largest odd size that fits. MS-SSIM
uses the standard five scale weights renormalized over the scales actually used; the last scale
contributes the full SSIM (luminance times contrast-structure), earlier scales contrast-structure
only, with negative terms clamped at 0.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.signal import convolve2d

from feddom.utils import ConfigurationError

logger = logging.getLogger(__name__)

PSNR_CAP_DB = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
DEFAULT_SCALES = 3
METRICS_VERSION = "ms-ssim/gauss11-1.5/clamp0/v1"


@dataclass
class MetricReport:
    """
    Quality at one SNR: PSNR and MS-SSIM per domain and their unweighted mean over domains.
    """
    snr_db: float
    psnr_db: float
    ms_ssim: float
    per_domain: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_grid(cls, grid: Dict[Tuple[str, float], Tuple[float, float]], snr_db: float) -> "MetricReport":
        """
        :param grid: (domain, SNR) -> (PSNR, MS-SSIM) cells.
        :raises ConfigurationError: If no cell was evaluated at ``snr_db``.
        """
        per_domain = {d: cell for (d, snr), cell in grid.items() if snr == snr_db}
        if not per_domain:
            raise ConfigurationError(f"No evaluation at {snr_db} dB")
        return cls(snr_db=float(snr_db),
                   psnr_db=float(np.mean([p for p, _ in per_domain.values()])),
                   ms_ssim=float(np.mean([s for _, s in per_domain.values()])),
                   per_domain=per_domain)

    def to_dict(self) -> dict:
        return {"snr_db": self.snr_db, "psnr_db": self.psnr_db, "ms_ssim": self.ms_ssim,
                "per_domain": {d: {"psnr_db": p, "ms_ssim": s} for d, (p, s) in self.per_domain.items()}}


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigurationError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """
    10 log10(max^2 / MSE); identical inputs return the 100 dB cap.
    """
    if not max_val > 0:
        raise ConfigurationError(f"max_val must be positive; received: {max_val}")
    a, b = _check_pair(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(max_val * max_val / err)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _fitted_window(shape: Tuple[int, int], size: int, sigma: float) -> np.ndarray:
    side = min(size, *shape)
    if side % 2 == 0:
        side -= 1
    return gaussian_window(max(side, 1), sigma)


def _ssim_terms(a: np.ndarray, b: np.ndarray, window: np.ndarray, max_val: float) -> Tuple[float, float]:
    """Mean SSIM map and mean contrast-structure map of one 2-D channel."""
    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2

    def filt(x: np.ndarray) -> np.ndarray:
        return convolve2d(x, np.rot90(window, 2), mode="valid")

    mu1, mu2 = filt(a), filt(b)
    mu1_sq, mu2_sq, mu1_mu2 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    sigma1_sq = filt(a * a) - mu1_sq
    sigma2_sq = filt(b * b) - mu2_sq
    sigma12 = filt(a * b) - mu1_mu2
    cs_map = (2 * sigma12 + c2) / (sigma1_sq + sigma2_sq + c2)
    lum_map = (2 * mu1_mu2 + c1) / (mu1_sq + mu2_sq + c1)
    return float(np.mean(lum_map * cs_map)), float(np.mean(cs_map))


def _channels(x: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3:
        return x
    raise ConfigurationError(f"Expected (H, W) or (C, H, W) image, got shape {x.shape}")


def ssim(a: np.ndarray, b: np.ndarray, max_val: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """
    Mean local SSIM, averaged over channels for (C, H, W) inputs.
    """
    a, b = _check_pair(a, b)
    a, b = _channels(a), _channels(b)
    window = _fitted_window(a.shape[1:], window_size, sigma)
    return float(np.mean([_ssim_terms(x, y, window, max_val)[0] for x, y in zip(a, b)]))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    x = x[:h // 2 * 2, :w // 2 * 2]
    return x.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a: np.ndarray, b: np.ndarray, scales: int = DEFAULT_SCALES, max_val: float = 1.0,
            window_size: int = 11, sigma: float = 1.5) -> float:
    """
    Multi-scale SSIM in [0, 1], averaged over channels.

    Scales are reduced while the coarsest image side would drop below 2 pixels.

    :param a: (H, W) or (C, H, W) image.
    :param b: Same shape as ``a``.
    :param scales: Number of dyadic scales, 1 to 5.
    :param max_val: Dynamic range L.
    """
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise ConfigurationError(f"scales must be in 1..{len(MS_SSIM_WEIGHTS)}; received: {scales}")
    a, b = _check_pair(a, b)
    a, b = _channels(a), _channels(b)
    side = min(a.shape[1:])
    used = scales
    while used > 1 and side // 2 ** (used - 1) < 2:
        used -= 1
    if used < scales:
        logger.info(f"MS-SSIM reduced from {scales} to {used} scales for {side}-pixel images")
    weights = np.asarray(MS_SSIM_WEIGHTS[:used])
    weights = weights / weights.sum()

    values = []
    for x, y in zip(a, b):
        factors = []
        for level in range(used):
            window = _fitted_window(x.shape, window_size, sigma)
            full, cs = _ssim_terms(x, y, window, max_val)
            term = full if level == used - 1 else cs
            factors.append(max(term, 0.0) ** weights[level])
            if level < used - 1:
                x, y = _downsample(x), _downsample(y)
        values.append(float(np.prod(factors)))
    return float(np.mean(values))


def batch_quality(originals: np.ndarray, reconstructions: np.ndarray, scales: int = DEFAULT_SCALES) \
        -> Tuple[float, float]:
    """
    Per-image PSNR and MS-SSIM averaged over a batch (not pooled MSE).

    :return: (mean PSNR in dB, mean MS-SSIM).
    """
    originals, reconstructions = _check_pair(originals, reconstructions)
    if originals.ndim != 4:
        raise ConfigurationError(f"Expected (N, C, H, W) batches, got {originals.shape}")
    psnrs = [psnr(x, y) for x, y in zip(originals, reconstructions)]
    ssims = [ms_ssim(x, y, scales=scales) for x, y in zip(originals, reconstructions)]
    return float(np.mean(psnrs)), float(np.mean(ssims))
