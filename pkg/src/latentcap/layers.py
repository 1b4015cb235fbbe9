import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    def __init__(self, dim, heads, kv_dim=None):
        super().__init__()
        assert dim % heads == 0
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(kv_dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x, context=None, causal=False):
        context = x if context is None else context
        B, L, D = x.shape
        h = self.heads
        q = self.q(x).view(B, L, h, D // h).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        k = k.view(B, -1, h, D // h).transpose(1, 2)
        v = v.view(B, -1, h, D // h).transpose(1, 2)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out(y.transpose(1, 2).reshape(B, L, D))


class Block(nn.Module):
    """Pre-LN transformer block: self-attention, optional cross-attention, FFN."""

    def __init__(self, dim, heads, ffn, cross=False, cond_dim=None):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.cross = None
        if cross:
            self.ln_c = nn.LayerNorm(dim)
            self.cross = Attention(dim, heads, kv_dim=cond_dim or dim)
        self.ln2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ffn), nn.GELU(), nn.Linear(ffn, dim))

    def forward(self, x, cond=None, causal=False):
        x = x + self.attn(self.ln1(x), causal=causal)
        if self.cross is not None:
            # text positions are the queries, condition slots the keys/values
            x = x + self.cross(self.ln_c(x), cond)
        return x + self.ff(self.ln2(x))


def timestep_embedding(t, dim, max_period=10000.0):
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb
