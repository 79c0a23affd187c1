"""Pixel-wise quality metrics on magnitude images: NMSE, PSNR, SSIM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ShapeMismatchError, UndefinedMetricError

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_pair(ref, est):
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ShapeMismatchError(f"shapes differ: {ref.shape} vs {est.shape}")
    return ref, est


def nmse(ref: np.ndarray, est: np.ndarray) -> float:
    """Normalized mean squared error ||ref - est||^2 / ||ref||^2."""
    ref, est = _as_pair(ref, est)
    denom = float(np.sum(ref * ref))
    if denom == 0.0:
        raise UndefinedMetricError("NMSE undefined for an all-zero reference")
    return float(np.sum((ref - est) ** 2)) / denom


def psnr(ref: np.ndarray, est: np.ndarray, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference.

    A perfect match returns `cap` instead of infinity.
    """
    ref, est = _as_pair(ref, est)
    mse = float(np.mean((ref - est) ** 2))
    if mse == 0.0:
        return cap
    peak = float(ref.max())
    if peak == 0.0:
        raise UndefinedMetricError("PSNR undefined for an all-zero reference")
    return min(cap, 10.0 * np.log10(peak * peak / mse))


def ssim(ref: np.ndarray, est: np.ndarray, window: int = SSIM_WINDOW,
         k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    """Mean local SSIM with a uniform window and population statistics.

    The dynamic range is max(ref) - min(ref); local means/variances come
    from every fully interior window ("valid" placement).
    """
    ref, est = _as_pair(ref, est)
    if min(ref.shape) < window:
        raise GeometryError(
            f"image {ref.shape} smaller than the {window}×{window} SSIM window"
        )
    dr = float(ref.max() - ref.min())
    if dr == 0.0:
        dr = 1.0
    c1 = (k1 * dr) ** 2
    c2 = (k2 * dr) ** 2

    def win_mean(x):
        v = np.lib.stride_tricks.sliding_window_view(x, (window, window))
        return v.mean(axis=(-2, -1))

    mu_x = win_mean(ref)
    mu_y = win_mean(est)
    xx = win_mean(ref * ref) - mu_x * mu_x
    yy = win_mean(est * est) - mu_y * mu_y
    xy = win_mean(ref * est) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def evaluate(ref_mag: np.ndarray, est_mag: np.ndarray,
             psnr_cap: float = PSNR_CAP_DB) -> dict[str, float]:
    """All three metrics for one magnitude-image pair."""
    return {
        "psnr": psnr(ref_mag, est_mag, cap=psnr_cap),
        "ssim": ssim(ref_mag, est_mag),
        "nmse": nmse(ref_mag, est_mag),
    }


@dataclass
class MetricReport:
    """Per-image metric rows plus set-level mean and std."""

    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, **metrics) -> None:
        self.rows.append({"image_id": image_id, **metrics})

    def mean(self, key: str) -> float:
        return float(np.mean([r[key] for r in self.rows]))

    def std(self, key: str) -> float:
        return float(np.std([r[key] for r in self.rows]))

    def summary(self) -> dict[str, dict[str, float]]:
        keys = [k for k in self.rows[0] if k != "image_id"] if self.rows else []
        return {
            "mean": {k: self.mean(k) for k in keys},
            "std": {k: self.std(k) for k in keys},
        }
