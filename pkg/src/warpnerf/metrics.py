"""Image quality metrics and the combined average-error score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsRow:
    psnr: float
    ssim: float
    avg_err: float
    lpips: float | None = None
    scene_id: str = ""
    view_count: int = 0
    config_hash: str = ""


def _to_numpy(image) -> np.ndarray:
    arr = np.asarray(image.detach().cpu() if hasattr(image, "detach") else image,
                     dtype=np.float64)
    return arr


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for [0, 1] images; +inf when equal."""
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def ssim(a, b) -> float:
    """Structural similarity with an 11x11 Gaussian window."""
    from skimage.metrics import structural_similarity

    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    kwargs = dict(data_range=1.0, gaussian_weights=True, sigma=1.5,
                  use_sample_covariance=False)
    if a.ndim == 3:
        kwargs["channel_axis"] = -1
    return float(structural_similarity(a, b, **kwargs))


def avg_err(psnr_value: float, ssim_value: float,
            lpips_value: float | None = None) -> float:
    """Geometric mean of 10^(-psnr/10), sqrt(1 - ssim) and lpips (when
    available). Infinite-psnr terms are dropped; any zero term makes the
    score 0."""
    terms = []
    if math.isfinite(psnr_value):
        terms.append(10.0 ** (-psnr_value / 10.0))
    terms.append(math.sqrt(max(0.0, 1.0 - ssim_value)))
    if lpips_value is not None:
        terms.append(lpips_value)
    if not terms:
        return 0.0
    if any(t == 0.0 for t in terms):
        return 0.0
    return math.exp(sum(math.log(t) for t in terms) / len(terms))
