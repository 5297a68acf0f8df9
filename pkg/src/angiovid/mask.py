"""Unsupervised knowledge mask from the first/last angiography frame difference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .data import AngioVideo
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = "otsu"  # "otsu" | "fixed"
    fixed_value: float = 0.15
    min_coverage: float = 0.005
    morphological_open_radius: int = 1

    def __post_init__(self):
        if self.mode not in ("otsu", "fixed"):
            raise ConfigError(f"unknown threshold mode {self.mode!r}")
        if not 0 < self.fixed_value < 1:
            raise ConfigError("fixed_value must lie in (0, 1)")
        if self.morphological_open_radius < 0 or self.min_coverage < 0:
            raise ConfigError("open radius and min_coverage must be nonnegative")


@dataclass
class KnowledgeMask:
    map: np.ndarray  # (H, W) float32, values exactly 0 or 1
    coverage: float
    threshold_used: float
    floored: bool = False  # replaced by all-ones because coverage fell under the floor


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def threshold_difference(diff: np.ndarray, policy: ThresholdPolicy) -> KnowledgeMask:
    diff = np.asarray(diff, dtype=np.float64)
    thr = policy.fixed_value
    if policy.mode == "otsu" and np.ptp(diff) > 1e-8:
        thr = float(threshold_otsu(diff))
    binary = diff > thr
    if policy.morphological_open_radius > 0:
        binary = ndimage.binary_opening(binary, structure=_disk(policy.morphological_open_radius))
    m = binary.astype(np.float32)
    floored = False
    if m.mean() < policy.min_coverage:
        m = np.ones_like(m)
        floored = True
    return KnowledgeMask(m, float(m.mean()), float(thr), floored)


def compute_mask(video: AngioVideo, policy: ThresholdPolicy = ThresholdPolicy()) -> KnowledgeMask:
    frames = video.frames if isinstance(video, AngioVideo) else np.asarray(video)
    if frames.shape[0] < 2:
        raise DataError("knowledge mask needs at least 2 frames")
    return threshold_difference(np.abs(frames[-1].astype(np.float64) - frames[0]), policy)


def iou(a, b) -> float:
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)
