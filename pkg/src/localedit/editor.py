"""Relevance-guided image editing: masked DDIM denoising with pixel compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .codec import Codec
from .denoise import Denoiser, GuidanceScales, guided_epsilon
from .relevance import DEFAULT_T_REL, compute_relevance, mask_to_pixel, threshold_mask
from .schedule import NoiseSchedule, add_noise, make_plan


@dataclass(frozen=True)
class EditTask:
    instruction: str
    scales: GuidanceScales = field(default_factory=GuidanceScales)
    tau: float = 0.5
    t_edit: float = 0.9
    num_steps: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if not 0.0 < self.t_edit <= 1.0:
            raise ValueError(f"t_edit must lie in (0, 1], got {self.t_edit}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")


@dataclass
class EditResult:
    image: np.ndarray
    relevance: np.ndarray
    mask: np.ndarray
    pixel_mask: np.ndarray
    trace: Optional[list] = None


def ddim_step(z_t, eps_hat, t, t_prev, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``TERMINAL`` allowed)."""
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if z_t.shape != eps_hat.shape:
        raise ValueError("z_t and eps_hat must share a shape")
    ab_t = sched.at(t)
    ab_prev = sched.at(t_prev)
    if ab_t >= 1.0:
        raise ValueError("cannot take a DDIM step from the no-noise boundary")
    if not ab_prev > ab_t:
        raise ValueError("t_prev must be less noisy than t")
    x0 = (z_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_hat


def masked_combine(z_tilde, x0_lat, eps0, t_prev, mask, sched: NoiseSchedule) -> np.ndarray:
    """Keep the denoised latent inside ``mask``; elsewhere use the noised input."""
    z_tilde = np.asarray(z_tilde, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    z_hat = add_noise(x0_lat, eps0, t_prev, sched)
    if z_hat.shape != z_tilde.shape:
        raise ValueError("z_tilde and the unedited latent must share a shape")
    if mask.shape != z_tilde.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != latent grid {z_tilde.shape[:2]}")
    return np.where(mask[..., None], z_tilde, z_hat)


def _denoise_loop(denoiser, latent, cond_latent, task, mask, resample_unedited_noise, trace):
    sched = denoiser.schedule
    rng = np.random.default_rng((task.seed, 1))
    eps0 = rng.standard_normal(latent.shape)
    plan = make_plan(sched, task.num_steps, task.t_edit)
    z = add_noise(latent, eps0, plan.steps[0], sched)
    for t, t_prev in plan.pairs():
        eps_hat = guided_epsilon(denoiser, z, t, cond_latent, task.instruction, task.scales)
        z = ddim_step(z, eps_hat, t, t_prev, sched)
        if mask is not None:
            noise = rng.standard_normal(latent.shape) if resample_unedited_noise else eps0
            z = masked_combine(z, latent, noise, t_prev, mask, sched)
        if trace is not None:
            trace.append({"t": t, "mean": float(z.mean()), "norm": float(np.linalg.norm(z))})
    return z


def ddim_edit(
    denoiser: Denoiser,
    codec: Codec,
    image: np.ndarray,
    task: EditTask,
    *,
    condition: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Unmasked guided DDIM edit (no relevance, no compositing)."""
    latent = codec.encode(image)
    cond_latent = latent if condition is None else codec.encode(condition)
    z0 = _denoise_loop(denoiser, latent, cond_latent, task, None, False, None)
    return np.clip(codec.decode(z0), 0.0, 1.0)


def edit_image(
    denoiser: Denoiser,
    codec: Codec,
    image: np.ndarray,
    task: EditTask,
    guidance_mask: Optional[np.ndarray] = None,
    *,
    relevance: Optional[np.ndarray] = None,
    condition: Optional[np.ndarray] = None,
    composite_source: Optional[np.ndarray] = None,
    pixel_mask: Optional[np.ndarray] = None,
    t_rel: float = DEFAULT_T_REL,
    relevance_samples: int = 1,
    resample_unedited_noise: bool = False,
    trace: bool = False,
) -> EditResult:
    """Edit ``image`` by ``task.instruction``, changing only the masked region.

    Without ``guidance_mask`` the relevance map is computed from the denoiser
    and thresholded at ``task.tau``.  ``condition`` overrides the image the
    denoiser is conditioned on, and ``composite_source`` supplies the pixels
    kept outside the mask (both default to ``image``).
    """
    image = np.asarray(image, dtype=np.float64)
    latent = codec.encode(image)
    cond_latent = latent if condition is None else codec.encode(condition)
    grid = latent.shape[:2]
    if guidance_mask is None:
        if relevance is None:
            relevance = compute_relevance(
                denoiser, codec, image, task.instruction, t_rel, task.seed,
                condition=condition, samples=relevance_samples,
            )
        mask = threshold_mask(relevance, task.tau)
    else:
        mask = np.asarray(guidance_mask, dtype=bool)
        if relevance is None:
            relevance = mask.astype(np.float64)
    if mask.shape != grid:
        raise ValueError(f"guidance mask shape {mask.shape} != latent grid {grid}")

    steps = [] if trace else None
    z0 = _denoise_loop(denoiser, latent, cond_latent, task, mask, resample_unedited_noise, steps)
    decoded = np.clip(codec.decode(z0), 0.0, 1.0)

    if pixel_mask is None:
        pixel_mask = mask_to_pixel(mask, codec)
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.shape != image.shape[:2]:
        raise ValueError(f"pixel mask shape {pixel_mask.shape} != image {image.shape[:2]}")
    source = image if composite_source is None else np.asarray(composite_source, dtype=np.float64)
    out = np.where(pixel_mask[..., None], decoded, source)
    return EditResult(image=out, relevance=relevance, mask=mask, pixel_mask=pixel_mask, trace=steps)
