"""PSNR/SSIM evaluation with the align-target-to-prediction convention."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .flowwarp import FlowField, warp
from .images import RgbImage

PSNR_SENTINEL = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _planes(img) -> np.ndarray:
    data = img.data if isinstance(img, RgbImage) else np.asarray(img)
    if data.ndim != 3:
        raise ShapeError(f"expected (C, H, W) image, got shape {data.shape}")
    return data.astype(np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at the 99 dB sentinel."""
    av, bv = _planes(a), _planes(b)
    if av.shape != bv.shape:
        raise ShapeError(f"psnr shapes differ: {av.shape} vs {bv.shape}")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL)


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the channel-mean gray."""
    av, bv = _planes(a), _planes(b)
    if av.shape != bv.shape:
        raise ShapeError(f"ssim shapes differ: {av.shape} vs {bv.shape}")
    ga = av.mean(axis=0)
    gb = bv.mean(axis=0)
    h, w = ga.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window")
    ax = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k1d = np.exp(-(ax * ax) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    kern = np.outer(k1d, k1d)
    kern /= kern.sum()

    def wmean(img):
        win = sliding_window_view(img, (SSIM_WINDOW, SSIM_WINDOW))
        return np.tensordot(win, kern, axes=([2, 3], [0, 1]))

    mu_a = wmean(ga)
    mu_b = wmean(gb)
    var_a = wmean(ga * ga) - mu_a * mu_a
    var_b = wmean(gb * gb) - mu_b * mu_b
    cov = wmean(ga * gb) - mu_a * mu_b
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


@dataclass
class EvalReport:
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.psnr_values)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_values)) if self.psnr_values else 0.0

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_values)) if self.ssim_values else 0.0

    def add(self, p: float, s: float) -> None:
        self.psnr_values.append(float(p))
        self.ssim_values.append(float(s))

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "psnr": self.psnr_values,
            "ssim": self.ssim_values,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def eval_aligned(pred, gt, flow_gt_to_pred: FlowField | None) -> tuple:
    """Warp the ground truth onto the prediction's grid, then score.

    The flow must be given explicitly; passing None states the pair is
    already aligned and skips the warp (a deliberate opt-in, so misaligned
    ground truth is never scored silently).
    """
    if flow_gt_to_pred is not None:
        gt = warp(gt if isinstance(gt, RgbImage) else RgbImage(
            np.asarray(gt, dtype=np.float32)), flow_gt_to_pred)
    return psnr(pred, gt), ssim(pred, gt)
