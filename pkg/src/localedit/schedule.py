"""Discrete noise schedules, forward noising and DDIM timestep plans.

Convention: ``alpha_bar[t]`` is the cumulative signal fraction at integer
timestep ``t`` (0 is the least noisy).  The pseudo-timestep ``TERMINAL``
stands for the fully denoised boundary where alpha_bar is exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TERMINAL = -1

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be a 1D array with at least 2 entries")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def num_train_timesteps(self) -> int:
        return int(self.alpha_bar.size)

    def at(self, t: int) -> float:
        """alpha_bar at timestep ``t``; ``TERMINAL`` maps to exactly 1."""
        if t == TERMINAL:
            return 1.0
        t = int(t)
        if not 0 <= t < self.num_train_timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.num_train_timesteps})")
        return float(self.alpha_bar[t])

    def timestep(self, fraction: float) -> int:
        """Map a noise fraction in [0, 1] to round(fraction * (T - 1))."""
        if not 0.0 <= fraction <= 1.0:
            raise ValueError(f"noise fraction {fraction} outside [0, 1]")
        return int(round(fraction * (self.num_train_timesteps - 1)))


def make_schedule(kind: str = "linear_beta", num_train_timesteps: int = 1000) -> NoiseSchedule:
    if int(num_train_timesteps) != num_train_timesteps or num_train_timesteps < 2:
        raise ValueError("num_train_timesteps must be an integer >= 2")
    T = int(num_train_timesteps)
    if kind == "linear_beta":
        betas = np.linspace(BETA_START, BETA_END, T, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        # Nichol & Dhariwal offset s=0.008, betas capped at 0.999
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(alpha_bar=alpha_bar, kind=kind)


def add_noise(x0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward-noise ``x0`` to timestep ``t``: sqrt(ab) x0 + sqrt(1 - ab) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.at(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class TimestepPlan:
    steps: tuple[int, ...]
    start_fraction: float

    def pairs(self):
        """Yield (t, t_prev) pairs; the last t_prev is ``TERMINAL``."""
        for k, t in enumerate(self.steps):
            t_prev = self.steps[k + 1] if k + 1 < len(self.steps) else TERMINAL
            yield t, t_prev

    def __len__(self):
        return len(self.steps)


def make_plan(sched: NoiseSchedule, num_steps: int, start_fraction: float) -> TimestepPlan:
    """Evenly spaced, strictly decreasing timesteps from the start level to 0."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not 0.0 < start_fraction <= 1.0:
        raise ValueError("start_fraction must lie in (0, 1]")
    first = sched.timestep(start_fraction)
    if num_steps > first + 1:
        raise ValueError(
            f"{num_steps} steps requested but only {first + 1} distinct timesteps "
            f"are available at start fraction {start_fraction}"
        )
    if num_steps == 1:
        steps = np.array([first])
    else:
        steps = np.rint(np.linspace(first, 0, num_steps)).astype(int)
    if np.any(np.diff(steps) >= 0):
        raise ValueError("timestep plan is not strictly decreasing")
    return TimestepPlan(steps=tuple(int(s) for s in steps), start_fraction=float(start_fraction))
