"""x0-predicting denoiser with cross-attention conditioning and guidance."""

from __future__ import annotations

import threading

import torch
import torch.nn as nn

from .layers import Block, timestep_embedding


class PassCounter:
    """Thread-safe count of network forward passes."""

    def __init__(self):
        self._n = 0
        self._lock = threading.Lock()

    def add(self, k=1):
        with self._lock:
            self._n += k

    @property
    def value(self):
        with self._lock:
            return self._n

    def reset(self):
        with self._lock:
            self._n = 0


FORWARD_PASSES = PassCounter()


class Diffuser(nn.Module):
    def __init__(self, latent_dim=256, dim=256, blocks=6, heads=4, ffn=1024, max_len=24,
                 cond_dim=None, counter: PassCounter | None = None):
        super().__init__()
        self.latent_dim, self.dim = latent_dim, dim
        # input is [x_t ; self_cond] concatenated channelwise
        self.in_proj = nn.Linear(2 * latent_dim, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.SiLU(), nn.Linear(4 * dim, dim))
        self.blocks = nn.ModuleList(
            Block(dim, heads, ffn, cross=True, cond_dim=cond_dim or dim) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)
        self.out_proj = nn.Linear(dim, latent_dim)
        self.counter = counter if counter is not None else FORWARD_PASSES

    def forward(self, x_t, cond, t, self_cond=None):
        if self_cond is None:
            self_cond = torch.zeros_like(x_t)
        if x_t.shape != self_cond.shape or x_t.shape[-1] != self.latent_dim:
            raise ValueError(f"bad latent shapes {tuple(x_t.shape)} / {tuple(self_cond.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(x_t.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.dim).to(x_t.dtype))
        h = self.in_proj(torch.cat([x_t, self_cond], dim=-1)) + self.pos[: x_t.shape[1]] + temb[:, None]
        for blk in self.blocks:
            h = blk(h, cond)
        return self.out_proj(self.norm(h))


def denoise(model, x_t, cond, t, self_cond=None):
    """One counted forward pass returning the predicted clean latent."""
    model.counter.add(1)
    return model(x_t, cond, t, self_cond)


def combine_guidance(f_cond, f_uncond, w):
    return (1 + w) * f_cond - w * f_uncond


def cfg_denoise(model, x_t, cond, null_cond, t, self_cond=None, w=1.0):
    """Classifier-free guided estimate; a single pass when ``w == 0``."""
    w = float(w)
    if w != w or w in (float("inf"), float("-inf")):
        raise ValueError(f"guidance weight must be finite, got {w}")
    f_c = denoise(model, x_t, cond, t, self_cond)
    if w == 0:
        return f_c
    # the same self-conditioning input feeds both branches
    f_u = denoise(model, x_t, null_cond, t, self_cond)
    return combine_guidance(f_c, f_u, w)
