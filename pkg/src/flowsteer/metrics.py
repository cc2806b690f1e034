"""PSNR, SSIM (full and masked) and an RBF-kernel MMD between image sets."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0


class MetricError(ValueError):
    pass


def _square(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a
    side = int(round(math.sqrt(a.size)))
    if side * side != a.size:
        raise MetricError(f"cannot view {a.size} pixels as a square image")
    return a.reshape(side, side)


def psnr(a, b, mask=None, max_val: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the pixels agree."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        sel = np.asarray(mask).ravel() > 0.5
        if not sel.any():
            raise MetricError("empty mask")
        a, b = a[sel], b[sel]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b, data_range: float = DATA_RANGE) -> np.ndarray:
    """Local SSIM centred on every pixel; borders are reflect-padded."""
    a, b = _square(a), _square(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricError(f"image side {min(a.shape)} is smaller than the {SSIM_WINDOW}px window")
    w = gaussian_window()
    half = SSIM_WINDOW // 2
    pa = sliding_window_view(np.pad(a, half, mode="reflect"), w.shape)
    pb = sliding_window_view(np.pad(b, half, mode="reflect"), w.shape)

    def wmean(x):
        return np.einsum("ijkl,kl->ij", x, w)

    mu_a, mu_b = wmean(pa), wmean(pb)
    var_a = wmean(pa * pa) - mu_a**2
    var_b = wmean(pb * pb) - mu_b**2
    cov = wmean(pa * pb) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def ssim(a, b, mask=None) -> float:
    """Mean local SSIM; with a mask, only windows centred on masked pixels count."""
    m = ssim_map(a, b)
    if mask is None:
        return float(m.mean())
    centres = _square(mask) > 0.5
    if centres.shape != m.shape:
        raise MetricError(f"mask shape {centres.shape} != image shape {m.shape}")
    if not centres.any():
        raise MetricError("empty mask")
    return float(m[centres].mean())


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    z = np.concatenate([x, y])
    d = np.sqrt(_sq_dists(z, z))
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(d[iu]))
    return med if med > 0.0 else 1.0


def kernel_mmd(set_a, set_b, bandwidth: float | None = None, unbiased: bool = True) -> float:
    """MMD^2 with an RBF kernel on flattened pixels.

    Bandwidth defaults to the median pairwise distance over the pooled sets.
    The default unbiased form drops the diagonals of the within-set sums, so
    on two identical sets it is slightly negative; ``unbiased=False`` keeps
    them and is exactly zero there.
    """
    x = np.asarray([np.ravel(v) for v in set_a], dtype=np.float64)
    y = np.asarray([np.ravel(v) for v in set_b], dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise MetricError("each set needs at least two images")
    sigma = median_bandwidth(x, y) if bandwidth is None else bandwidth
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * _sq_dists(x, x))
    kyy = np.exp(-gamma * _sq_dists(y, y))
    kxy = np.exp(-gamma * _sq_dists(x, y))
    n, m = len(x), len(y)
    if not unbiased:
        return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
    sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


@dataclass
class MetricReport:
    psnr_full: float
    ssim_full: float
    psnr_region: float
    ssim_region: float
    mmd: float | None = None
    n_samples: int = 1


def score_pair(out, ref, mask) -> MetricReport:
    return MetricReport(
        psnr_full=psnr(out, ref),
        ssim_full=ssim(out, ref),
        psnr_region=psnr(out, ref, mask),
        ssim_region=ssim(out, ref, mask),
    )
