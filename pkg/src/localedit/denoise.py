"""Noise-prediction interface, guided score combination and oracle denoisers.

The oracles replace a pretrained instruction-conditioned network with
closed-form predictors so every downstream equation can be checked exactly:

* ``ProceduralDenoiser`` predicts the noise that points the current latent
  straight at a deterministic clean target chosen by the condition.
* ``GmmDenoiser`` returns the Bayes-optimal noise prediction under a
  Gaussian-mixture prior over clean latents, one mixture per text label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule


def is_null_text(text: Optional[str]) -> bool:
    return text is None or text == ""


@dataclass(frozen=True)
class Condition:
    """Denoiser conditioning; ``None`` stands for the null image / null text."""

    image: Optional[np.ndarray] = None
    text: Optional[str] = None


@dataclass(frozen=True)
class GuidanceScales:
    s_I: float = 1.0
    s_T: float = 7.5

    def __post_init__(self):
        for name in ("s_I", "s_T"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


class Denoiser:
    """Base class: ``predict(z_t, t, cond)`` returns a noise estimate."""

    schedule: NoiseSchedule

    def predict(self, z_t: np.ndarray, t: int, cond: Condition) -> np.ndarray:
        raise NotImplementedError

    def _signal(self, t):
        ab = self.schedule.at(t)
        if ab >= 1.0:
            raise ValueError("oracle noise prediction is undefined at the no-noise boundary")
        return ab


class ProceduralDenoiser(Denoiser):
    """Oracle whose clean estimate is ``target_fn(image, text)`` at every noise level.

    With the null image the target is the zero latent; with the null text the
    target is the conditioning image itself.
    """

    def __init__(self, schedule: NoiseSchedule, target_fn: Callable[[np.ndarray, str], np.ndarray]):
        self.schedule = schedule
        self.target_fn = target_fn

    def target(self, z_shape, cond: Condition) -> np.ndarray:
        if cond.image is None:
            return np.zeros(z_shape)
        image = np.asarray(cond.image, dtype=np.float64)
        if image.shape != tuple(z_shape):
            raise ValueError(f"condition image shape {image.shape} != latent shape {tuple(z_shape)}")
        if is_null_text(cond.text):
            return image
        target = np.asarray(self.target_fn(image, cond.text), dtype=np.float64)
        if target.shape != image.shape:
            raise ValueError("target_fn returned a latent of the wrong shape")
        return target

    def predict(self, z_t, t, cond):
        z_t = np.asarray(z_t, dtype=np.float64)
        ab = self._signal(t)
        x_hat = self.target(z_t.shape, cond)
        return (z_t - math.sqrt(ab) * x_hat) / math.sqrt(1.0 - ab)


@dataclass
class EditTargets:
    """Paired-image lookup backing a procedural denoiser's text-conditioned target.

    Each instruction holds ``(original, edited)`` latent pairs.  A query image
    is matched to the nearest registered original and receives that pair's
    edit delta, so the target differs from the query only where the edit acts.
    """

    tolerance: float = 2.0 / 255.0
    pairs: dict = field(default_factory=dict)
    noops: set = field(default_factory=set)

    def register(self, instruction: str, original: np.ndarray, edited: np.ndarray) -> None:
        original = np.asarray(original, dtype=np.float64)
        edited = np.asarray(edited, dtype=np.float64)
        if original.shape != edited.shape:
            raise ValueError("original and edited latents must share a shape")
        self.pairs.setdefault(instruction, []).append((original, edited))

    def register_noop(self, instruction: str) -> None:
        self.noops.add(instruction)

    def __contains__(self, instruction):
        return instruction in self.pairs or instruction in self.noops

    def __call__(self, image: np.ndarray, text: str) -> np.ndarray:
        if text in self.noops:
            return image
        if text not in self.pairs:
            raise KeyError(f"unknown instruction {text!r}")
        best, best_err = None, math.inf
        for original, edited in self.pairs[text]:
            if original.shape != image.shape:
                continue
            err = float(np.max(np.abs(original - image)))
            if err < best_err:
                best, best_err = (original, edited), err
        if best is None or best_err > self.tolerance:
            raise LookupError(f"no registered view matches the conditioning image for {text!r}")
        original, edited = best
        return image + (edited - original)


@dataclass(frozen=True)
class GmmComponents:
    means: np.ndarray  # (K, *latent_shape)
    weights: np.ndarray  # (K,)
    variance: float = 0.0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim < 1 or means.shape[0] < 1:
            raise ValueError("need at least one component")
        if weights.shape != (means.shape[0],) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per component")
        if not math.isclose(weights.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("weights must sum to 1")
        if self.variance < 0:
            raise ValueError("component variance must be >= 0")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "weights", weights)


class GmmDenoiser(Denoiser):
    """Exact posterior-mean denoiser for a Gaussian-mixture prior per text label.

    The image condition is ignored; the null text maps to the ``None`` label.
    """

    def __init__(self, schedule: NoiseSchedule, priors: dict):
        self.schedule = schedule
        self.priors = {(None if is_null_text(k) else k): v for k, v in priors.items()}

    def posterior_mean(self, z_t: np.ndarray, t: int, text: Optional[str]) -> np.ndarray:
        key = None if is_null_text(text) else text
        if key not in self.priors:
            raise KeyError(f"no prior registered for text label {text!r}")
        prior = self.priors[key]
        ab = self._signal(t)
        a = math.sqrt(ab)
        var = 1.0 - ab + ab * prior.variance
        mu = prior.means
        if mu.shape[1:] != z_t.shape:
            raise ValueError(f"latent shape {z_t.shape} != prior shape {mu.shape[1:]}")
        axes = tuple(range(1, mu.ndim))
        sq = np.sum((z_t[None] - a * mu) ** 2, axis=axes)
        log_r = np.log(prior.weights) - 0.5 * sq / var
        resp = np.exp(log_r - logsumexp(log_r))
        gain = a * prior.variance / var
        cond_means = mu + gain * (z_t[None] - a * mu)
        return np.tensordot(resp, cond_means, axes=(0, 0))

    def predict(self, z_t, t, cond):
        z_t = np.asarray(z_t, dtype=np.float64)
        ab = self._signal(t)
        x0 = self.posterior_mean(z_t, t, cond.text)
        return (z_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def predict(denoiser: Denoiser, z_t, t, cond: Condition) -> np.ndarray:
    return denoiser.predict(z_t, t, cond)


def combine_guidance(eps_uncond, eps_image, eps_full, scales: GuidanceScales) -> np.ndarray:
    return (
        eps_uncond
        + scales.s_I * (eps_image - eps_uncond)
        + scales.s_T * (eps_full - eps_image)
    )


def guided_epsilon(denoiser: Denoiser, z_t, t, image, text, scales: GuidanceScales) -> np.ndarray:
    """Dual-scale guided noise estimate from the three conditionings."""
    eps_uncond = denoiser.predict(z_t, t, Condition(None, None))
    eps_image = denoiser.predict(z_t, t, Condition(image, None))
    eps_full = denoiser.predict(z_t, t, Condition(image, text))
    return combine_guidance(eps_uncond, eps_image, eps_full, scales)
