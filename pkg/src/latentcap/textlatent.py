"""Word vocabulary, the split text autoencoder and latent-space regularisation.

The text stack is a small transformer whose lower ``split`` layers form the
encoder (tokens -> latent) and whose upper layers plus the LM head form the
non-autoregressive decoder (latent -> per-position logits).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .layers import Block

PAD, CLS, SEP, MASK = "[PAD]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, CLS, SEP, MASK)


class Vocabulary:
    def __init__(self, words):
        tokens = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {w: i for i, w in enumerate(tokens)}
        self.pad_id = self.stoi[PAD]
        self.cls_id = self.stoi[CLS]
        self.sep_id = self.stoi[SEP]
        self.mask_id = self.stoi[MASK]
        self.special_ids = (self.pad_id, self.cls_id, self.sep_id, self.mask_id)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def content_ids(self):
        return [i for i in range(len(self)) if i not in self.special_ids]

    def save(self, path):
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:4]) != SPECIALS:
            raise ValueError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(lines[4:])


class TokenizeError(ValueError):
    pass


def tokenize(caption: str, vocab: Vocabulary, max_len: int = 24) -> np.ndarray:
    words = caption.split()
    if len(words) + 2 > max_len:
        raise TokenizeError(f"caption has {len(words)} words; at most {max_len - 2} fit in {max_len}")
    ids = [vocab.cls_id]
    for w in words:
        if w not in vocab.stoi or w in SPECIALS:
            raise TokenizeError(f"unknown word {w!r}")
        ids.append(vocab.stoi[w])
    ids.append(vocab.sep_id)
    ids += [vocab.pad_id] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64)


def strip_specials(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[int(i)] for i in ids if int(i) not in vocab.special_ids)


def detokenize(ids, vocab: Vocabulary) -> str:
    return strip_specials(ids, vocab)


def special_mask(ids: torch.Tensor, vocab: Vocabulary) -> torch.Tensor:
    ids = torch.as_tensor(ids)
    m = torch.zeros_like(ids, dtype=torch.bool)
    for s in vocab.special_ids:
        m |= ids == s
    return m


@dataclass
class LatentStats:
    mean: torch.Tensor
    std: torch.Tensor
    eps: float = 1e-5
    sample_count: int = 0


def normalize(x, stats: LatentStats | None):
    if stats is None:
        raise ValueError("latent statistics have not been estimated")
    return (x - stats.mean.to(x.dtype)) / (stats.std.to(x.dtype) + stats.eps)


def denormalize(z, stats: LatentStats | None):
    if stats is None:
        raise ValueError("latent statistics have not been estimated")
    return z * (stats.std.to(z.dtype) + stats.eps) + stats.mean.to(z.dtype)


def reassign(x, mask):
    """Zero the rows of special-token positions; other rows pass through."""
    return x.masked_fill(torch.as_tensor(mask, dtype=torch.bool).unsqueeze(-1), 0.0)


class TextAutoencoder(nn.Module):
    def __init__(self, vocab_size, dim=256, layers=4, split=2, heads=4, ffn=1024, max_len=24):
        super().__init__()
        if not 0 < split < layers:
            raise ValueError(f"split {split} must lie strictly inside 0..{layers}")
        self.dim, self.max_len, self.split = dim, max_len, split
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.enc_pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.enc_layers = nn.ModuleList(Block(dim, heads, ffn) for _ in range(split))
        self.enc_norm = nn.LayerNorm(dim)
        # zeroed special rows are indistinguishable without position information
        self.dec_pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.dec_layers = nn.ModuleList(Block(dim, heads, ffn) for _ in range(layers - split))
        self.dec_norm = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, vocab_size)

    def encoder_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith(("tok_emb", "enc_")):
                yield name, p

    def decoder_body_parameters(self):
        for name, p in self.named_parameters():
            if name.startswith(("dec_",)):
                yield name, p

    def freeze_backbone(self):
        for _, p in self.encoder_parameters():
            p.requires_grad_(False)
        for _, p in self.decoder_body_parameters():
            p.requires_grad_(False)

    def encode(self, ids):
        h = self.tok_emb(ids) + self.enc_pos[: ids.shape[1]]
        for blk in self.enc_layers:
            h = blk(h)
        return self.enc_norm(h)

    def decode(self, x):
        h = x + self.dec_pos[: x.shape[1]]
        for blk in self.dec_layers:
            h = blk(h)
        return self.lm_head(self.dec_norm(h))


@torch.no_grad()
def encode_latent(ae: TextAutoencoder, ids, stats: LatentStats, vocab: Vocabulary, batch_size=512):
    """Regularised training latent: encode -> normalise -> zero special rows."""
    ids = torch.as_tensor(ids)
    out = []
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        x = normalize(ae.encode(chunk), stats)
        out.append(reassign(x, special_mask(chunk, vocab)))
    return torch.cat(out)


@torch.no_grad()
def estimate_stats(ae: TextAutoencoder, ids, vocab: Vocabulary, eps=1e-5, min_samples=1000,
                   batch_size=512) -> LatentStats:
    ids = torch.as_tensor(ids)
    if len(ids) < min_samples:
        raise ValueError(f"need at least {min_samples} captions to estimate stats, got {len(ids)}")
    rows = []
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        x = ae.encode(chunk).double()
        keep = ~special_mask(chunk, vocab)
        rows.append(x[keep])
    rows = torch.cat(rows)
    mean = rows.mean(0)
    std = (rows - mean).pow(2).mean(0).sqrt()
    return LatentStats(mean, std, float(eps), int(len(ids)))
