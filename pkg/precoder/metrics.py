"""Frame-comparison measures: MSE, PSNR and SSIM, plus the copy-last-frame baseline.

Frames are (channels, height, width) or (height, width) arrays; all arithmetic is done in
double precision.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from precoder.constants import PIX_MAX, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW


def _as_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Frames must have equal shapes, got {a.shape} and {b.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _as_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value: float, pix_max: float = PIX_MAX) -> float:
    if value == 0:
        return math.inf
    return 10 * math.log10(pix_max**2 / value)


def psnr(a: np.ndarray, b: np.ndarray, pix_max: float = PIX_MAX) -> float:
    """Peak signal-to-noise ratio in dB; identical frames give +inf."""
    return psnr_from_mse(mse(a, b), pix_max)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2
    profile = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray, pix_max: float) -> float:
    size = window.shape[0]
    patches_a = np.lib.stride_tricks.sliding_window_view(a, (size, size))
    patches_b = np.lib.stride_tricks.sliding_window_view(b, (size, size))
    mu_a = np.tensordot(patches_a, window, axes=2)
    mu_b = np.tensordot(patches_b, window, axes=2)
    dev_a = patches_a - mu_a[..., None, None]
    dev_b = patches_b - mu_b[..., None, None]
    var_a = np.tensordot(dev_a * dev_a, window, axes=2)
    var_b = np.tensordot(dev_b * dev_b, window, axes=2)
    cov = np.tensordot(dev_a * dev_b, window, axes=2)
    c1 = (SSIM_K1 * pix_max) ** 2
    c2 = (SSIM_K2 * pix_max) ** 2
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(numerator / denominator))


def ssim(a: np.ndarray, b: np.ndarray, pix_max: float = PIX_MAX) -> float:
    """Mean structural similarity over valid 11x11 Gaussian-window positions, averaged over
    channels.
    """
    a, b = _as_pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"Expected (C, H, W) or (H, W) frames, got shape {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs frames of at least {SSIM_WINDOW} pixels, got {a.shape}")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(x, y, window, pix_max) for x, y in zip(a, b)]))


@dataclass
class MetricReport:
    """Per-frame MSE, PSNR and SSIM. PSNR values of identical frames are +inf and are left
    out of `mean_psnr`.
    """

    mse: list[float] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @classmethod
    def from_frames(
        cls,
        predictions: Iterable[np.ndarray],
        targets: Iterable[np.ndarray],
        pix_max: float = PIX_MAX,
    ) -> MetricReport:
        report = cls()
        for prediction, target in zip(predictions, targets, strict=True):
            report.add(prediction, target, pix_max)
        return report

    def add(self, prediction: np.ndarray, target: np.ndarray, pix_max: float = PIX_MAX) -> None:
        value = mse(prediction, target)
        self.mse.append(value)
        self.psnr.append(psnr_from_mse(value, pix_max))
        self.ssim.append(ssim(prediction, target, pix_max))

    def extend(self, other: MetricReport) -> None:
        self.mse.extend(other.mse)
        self.psnr.extend(other.psnr)
        self.ssim.extend(other.ssim)

    @property
    def frame_count(self) -> int:
        return len(self.mse)

    @property
    def mean_mse(self) -> float:
        return _mean(self.mse)

    @property
    def mean_psnr(self) -> float:
        finite = [v for v in self.psnr if math.isfinite(v)]
        if len(finite) < len(self.psnr):
            logging.debug(f"Excluding {len(self.psnr) - len(finite)} infinite PSNR values")
        return _mean(finite)

    @property
    def mean_ssim(self) -> float:
        return _mean(self.ssim)

    def rows(self) -> Iterable[tuple[int, float, float, float]]:
        for index, values in enumerate(zip(self.mse, self.psnr, self.ssim)):
            yield (index, *values)

    def summary(self) -> dict[str, float | int]:
        return {
            "frames": self.frame_count,
            "mse": self.mean_mse,
            "psnr": self.mean_psnr,
            "ssim": self.mean_ssim,
        }


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


def copy_last_frame_baseline(
    sequence: np.ndarray, target_index: int = -1, pix_max: float = PIX_MAX
) -> MetricReport:
    """Score frame t-1 as the prediction of the target frame t of a (time, C, H, W) array."""
    if len(sequence) < 2:
        raise ValueError(f"The baseline needs at least two frames, got {len(sequence)}")
    target_index %= len(sequence)
    if target_index == 0:
        raise ValueError("The first frame has no previous frame to copy")
    return MetricReport.from_frames(
        [sequence[target_index - 1]], [sequence[target_index]], pix_max
    )
