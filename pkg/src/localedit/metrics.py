"""Pixel-space evaluation: PSNR, mask IoU and consecutive-frame consistency.

The frame metric is a plain pixel analog of CLIP frame similarity; the
family is recorded in every report so the two are never conflated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# PSNR reported for zero error (keeps reports JSON-safe)
PSNR_CAP = 100.0


@dataclass
class MetricReport:
    name: str
    values: list
    params: dict = field(default_factory=dict)
    family: str = "pixel"

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else math.nan

    def to_dict(self):
        return {"name": self.name, "family": self.family, "values": list(map(float, self.values)),
                "mean": self.mean, "params": self.params}


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) for images in [0, 1], optionally over ``mask`` pixels only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise ValueError("mask must match the image grid")
        if not mask.any():
            raise ValueError("PSNR restricted to an empty mask")
        err = err[mask]
    mse = float(np.mean(err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def frame_consistency(frames) -> float:
    """Mean over consecutive pairs of 1 - mean absolute pixel difference."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < 2:
        raise ValueError("frame consistency needs at least two frames")
    scores = [1.0 - float(np.mean(np.abs(a - b))) for a, b in zip(frames[:-1], frames[1:])]
    return float(np.mean(scores))


def psnr_report(pairs, masks=None, name="psnr") -> MetricReport:
    masks = masks if masks is not None else [None] * len(pairs)
    return MetricReport(name, [psnr(a, b, m) for (a, b), m in zip(pairs, masks)])
