"""Relevance maps from conditional/unconditional noise disagreement, and edit masks."""

from __future__ import annotations

import numpy as np

from .codec import Codec
from .denoise import Condition, Denoiser
from .schedule import add_noise

IQR_RATIO = 1.5
DEFAULT_T_REL = 0.8


def normalize_relevance(raw: np.ndarray, ratio: float = IQR_RATIO) -> np.ndarray:
    """Clamp high outliers at Q3 + ratio * IQR, then min-max normalize to [0, 1].

    Quantiles use linear interpolation between order statistics.  The clamp is
    skipped when the fence does not exceed the minimum, which happens when
    most of the map is exactly zero; clamping there would erase the map.
    A constant map normalizes to all zeros.
    """
    raw = np.asarray(raw, dtype=np.float64)
    q1, q3 = np.quantile(raw, [0.25, 0.75])
    fence = q3 + ratio * (q3 - q1)
    lo = raw.min()
    if fence > lo:
        raw = np.minimum(raw, fence)
    hi = raw.max()
    if hi <= lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def raw_relevance(
    denoiser: Denoiser,
    codec: Codec,
    image: np.ndarray,
    instruction: str,
    t_rel: float = DEFAULT_T_REL,
    seed: int = 0,
    *,
    condition: np.ndarray | None = None,
    samples: int = 1,
) -> np.ndarray:
    """Channel-mean absolute difference of text-conditioned vs text-free predictions."""
    if not instruction:
        raise ValueError("instruction must be a non-empty string")
    if not 0.0 < t_rel < 1.0:
        raise ValueError(f"t_rel must lie in (0, 1), got {t_rel}")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    sched = denoiser.schedule
    t = sched.timestep(t_rel)
    latent = codec.encode(image)
    cond_latent = latent if condition is None else codec.encode(condition)
    rng = np.random.default_rng(seed)
    diff = np.zeros(latent.shape)
    for _ in range(samples):
        eps = rng.standard_normal(latent.shape)
        z = add_noise(latent, eps, t, sched)
        eps_full = denoiser.predict(z, t, Condition(cond_latent, instruction))
        eps_image = denoiser.predict(z, t, Condition(cond_latent, None))
        diff += np.abs(eps_full - eps_image)
    diff /= samples
    return diff.mean(axis=-1)


def compute_relevance(
    denoiser: Denoiser,
    codec: Codec,
    image: np.ndarray,
    instruction: str,
    t_rel: float = DEFAULT_T_REL,
    seed: int = 0,
    *,
    condition: np.ndarray | None = None,
    samples: int = 1,
) -> np.ndarray:
    """Normalized relevance map in [0, 1] at latent resolution.

    ``condition`` is the conditioning image when it differs from the image
    being noised (e.g. a rendered view conditioned on its original capture).
    """
    raw = raw_relevance(
        denoiser, codec, image, instruction, t_rel, seed, condition=condition, samples=samples
    )
    return normalize_relevance(raw)


def threshold_mask(rel: np.ndarray, tau: float) -> np.ndarray:
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"mask threshold must lie in [0, 1], got {tau}")
    return np.asarray(rel) >= tau


def mask_to_pixel(mask: np.ndarray, codec: Codec) -> np.ndarray:
    """Nearest-neighbour upsample of a latent-resolution mask."""
    f = codec.factor
    mask = np.asarray(mask, dtype=bool)
    if f == 1:
        return mask.copy()
    return np.repeat(np.repeat(mask, f, axis=0), f, axis=1)


def relevance_to_pixel(rel: np.ndarray, codec: Codec) -> np.ndarray:
    f = codec.factor
    rel = np.asarray(rel, dtype=np.float64)
    if f == 1:
        return rel.copy()
    return np.repeat(np.repeat(rel, f, axis=0), f, axis=1)


def relevance_to_latent(rel: np.ndarray, codec: Codec) -> np.ndarray:
    """Block-average a pixel-resolution relevance map down to latent resolution."""
    return codec.encode(np.asarray(rel, dtype=np.float64))
