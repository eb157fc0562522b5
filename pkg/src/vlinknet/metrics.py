"""MAE, PSNR, SSIM and FID on the 8-bit intensity scale.

Images arrive as ``(C, H, W)`` (or ``(H, W)``) arrays in [-1, 1] and are
mapped to [0, 255] before scoring so numbers are comparable to the usual
inpainting tables.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.ndimage import correlate1d

from vlinknet.imagecore import DimensionError

PSNR_CAP = 100.0
MAX_VALUE = 255.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * MAX_VALUE) ** 2
SSIM_C2 = (0.03 * MAX_VALUE) ** 2
FID_EPS = 1e-6


def to_8bit(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def _pair(gt, pred):
    a, b = to_8bit(gt), to_8bit(pred)
    if a.shape != b.shape:
        raise DimensionError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _region(a, b, mask):
    if mask is None:
        return a, b
    if hasattr(mask, "detach"):
        mask = mask.detach().cpu().numpy()
    m = np.asarray(mask)
    if m.ndim == a.ndim - 1:
        m = m[None]
    hole = np.broadcast_to(m < 0.5, a.shape)
    return a[hole], b[hole]


def mae(gt, pred, mask=None) -> float:
    """Mean absolute error in 8-bit units; ``mask`` restricts it to hole pixels."""
    a, b = _region(*_pair(gt, pred), mask)
    if a.size == 0:
        return 0.0
    return float(np.mean(np.abs(a - b)))


def psnr(gt, pred, mask=None) -> float:
    """``10 log10(255^2 / MSE)``; identical inputs give ``PSNR_CAP``."""
    a, b = _region(*_pair(gt, pred), mask)
    mse = float(np.mean((a - b) ** 2)) if a.size else 0.0
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(MAX_VALUE**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return y[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-channel 8-bit arrays over every full window."""
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(gt, pred) -> float:
    """Mean Gaussian-windowed SSIM, averaged over channels."""
    a, b = _pair(gt, pred)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise DimensionError(f"ssim needs images of at least {SSIM_WINDOW}px, got {a.shape[-2:]}")
    return float(np.mean([ssim_map(x, y).mean() for x, y in zip(a, b)]))


def _stats(features):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] < 2:
        raise ValueError(f"fid needs at least 2 samples, got {f.shape[0]}")
    return f.mean(axis=0), np.atleast_2d(np.cov(f, rowvar=False))


def fid(real_features, fake_features) -> float:
    """Frechet distance between Gaussian fits of two ``(n, d)`` feature sets."""
    mu_r, cov_r = _stats(real_features)
    mu_f, cov_f = _stats(fake_features)
    if mu_r.shape != mu_f.shape:
        raise DimensionError(f"feature dims differ: {mu_r.shape[0]} vs {mu_f.shape[0]}")
    covmean = scipy.linalg.sqrtm(cov_r @ cov_f)
    if not np.isfinite(covmean).all() or np.abs(np.imag(covmean)).max() > 1e-3:
        warnings.warn(f"singular covariance product; regularizing with {FID_EPS}*I", stacklevel=2)
        off = FID_EPS * np.eye(cov_r.shape[0])
        covmean = scipy.linalg.sqrtm((cov_r + off) @ (cov_f + off))
    covmean = np.real(covmean)
    diff = mu_r - mu_f
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_f) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


@dataclass
class MetricReport:
    mae: float
    fid: float
    psnr: float
    ssim: float
    count: int
    buckets: dict[str, "MetricReport"] = field(default_factory=dict)
    extractor: str = ""

    def rows(self, method: str = "V-LinkNet"):
        yield {"Method": method, "Bucket": "all", **self._values()}
        for name, rep in self.buckets.items():
            yield {"Method": method, "Bucket": name, **rep._values()}

    def _values(self):
        return {"MAE": self.mae, "FID": self.fid, "PSNR": self.psnr, "SSIM": self.ssim,
                "Count": self.count}

    def to_csv(self, method: str = "V-LinkNet") -> str:
        buf = io.StringIO()
        cols = ["Method", "Bucket", "MAE", "FID", "PSNR", "SSIM", "Count"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows(method):
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def table(self, method: str = "V-LinkNet") -> str:
        lines = [f"{'Method':<12}{'Bucket':<14}{'MAE':>10}{'FID':>10}{'PSNR':>10}{'SSIM':>8}{'N':>6}"]
        for r in self.rows(method):
            lines.append(
                f"{r['Method']:<12}{r['Bucket']:<14}{r['MAE']:>10.2f}{r['FID']:>10.2f}"
                f"{r['PSNR']:>10.2f}{r['SSIM']:>8.3f}{r['Count']:>6d}"
            )
        if self.extractor:
            lines.append(f"FID feature extractor: {self.extractor}")
        return "\n".join(lines)
