"""Variance schedules and the closed-form forward (noising) process."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

BETA_MIN = 1e-4
BETA_MAX_LINEAR = 0.02
BETA_CLIP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables for a T-step diffusion.

    ``betas[t - 1]`` and ``alphas[t - 1]`` hold beta_t / alpha_t for t in 1..T;
    ``alpha_bars`` has T + 1 entries with ``alpha_bars[0] == 1`` so that
    t = 0 means "clean latent".
    """

    kind: str
    total_steps: int
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    noise_factor: float = 1.0
    s: float = 0.008

    def alpha_bar(self, t):
        return self.alpha_bars[t]

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.alpha_bars.copy())[t].to(dtype)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "steps": self.total_steps, "s": self.s,
                "noise_factor": self.noise_factor}


def _cosine_alpha_bar(T: int, s: float) -> np.ndarray:
    t = np.arange(T + 1, dtype=np.float64)
    g = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    return g / g[0]


def make_schedule(kind: str = "cosine", T: int = 1000, s: float = 0.008,
                  noise_factor: float = 1.0) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"total steps must be a positive integer, got {T!r}")
    if not math.isfinite(s) or s <= 0:
        raise ValueError(f"cosine offset must be finite and positive, got {s!r}")
    if not math.isfinite(noise_factor) or noise_factor <= 0:
        raise ValueError(f"noise factor must be finite and positive, got {noise_factor!r}")

    if kind == "cosine":
        ab = _cosine_alpha_bar(int(T), s)
        betas = 1.0 - ab[1:] / ab[:-1]
    elif kind == "linear":
        betas = np.linspace(BETA_MIN, BETA_MAX_LINEAR, int(T), dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")

    betas = np.clip(betas, BETA_MIN, BETA_CLIP)
    alphas = 1.0 - betas
    # recompute from the clipped betas so the product relation is exact
    alpha_bars = np.empty(int(T) + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    for i in range(int(T)):
        alpha_bars[i + 1] = alpha_bars[i] * alphas[i]

    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(kind, int(T), betas, alphas, alpha_bars, float(noise_factor), float(s))


def schedule_from_dict(d: dict) -> NoiseSchedule:
    return make_schedule(d.get("kind", "cosine"), int(d.get("steps", 1000)),
                         float(d.get("s", 0.008)), float(d.get("noise_factor", 1.0)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noisy latent sqrt(ab_t) * x0 + F * sqrt(1 - ab_t) * eps.

    ``t`` is an int or a tensor of shape (B,) broadcasting over the leading dim.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    tt = torch.as_tensor(t)
    if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > sched.total_steps:
        raise ValueError(f"timestep out of range 1..{sched.total_steps}: {t!r}")
    ab = sched.alpha_bar_tensor(tt, dtype=x0.dtype)
    if ab.dim() > 0:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + sched.noise_factor * (1.0 - ab).sqrt() * eps
