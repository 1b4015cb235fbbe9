"""The full captioner: text autoencoder, condition encoder, diffuser, stats, schedule."""

from __future__ import annotations

import numpy as np
import torch

from .config import RunConfig
from .diffuser import Diffuser, PassCounter
from .scenegen import ConditionEncoder, caption_words
from .schedule import make_schedule
from .textlatent import LatentStats, TextAutoencoder, Vocabulary

PURPOSES = {"data": 0, "init": 1, "noise": 2, "shuffle": 3, "sampling": 4, "pretrain": 5, "ar": 6}


def derive_seed(root: int, purpose: str, *extra: int) -> int:
    """Child seed for one purpose, split from the root seed."""
    ss = np.random.SeedSequence([int(root), PURPOSES[purpose], *map(int, extra)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def default_vocab() -> Vocabulary:
    return Vocabulary(caption_words())


class Captioner:
    def __init__(self, cfg: RunConfig, vocab: Vocabulary | None = None,
                 counter: PassCounter | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.vocab = vocab or default_vocab()
        self.schedule = make_schedule(cfg.schedule.kind, cfg.schedule.steps, cfg.schedule.s,
                                      cfg.schedule.noise_factor)
        tc, dc = cfg.text, cfg.diffuser
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, "init"))
            self.ae = TextAutoencoder(len(self.vocab), tc.dim, tc.layers, tc.split, tc.heads,
                                      tc.ffn, tc.max_len)
            self.cond = ConditionEncoder(dc.dim)
            self.diffuser = Diffuser(tc.dim, dc.dim, dc.blocks, dc.heads, dc.ffn, tc.max_len,
                                     cond_dim=dc.dim, counter=counter)
        for m in self.modules().values():
            m.to(dtype)
        self.stats: LatentStats | None = None

    @property
    def max_len(self):
        return self.cfg.text.max_len

    def modules(self):
        return {"ae": self.ae, "cond": self.cond, "diffuser": self.diffuser}

    def eval(self):
        for m in self.modules().values():
            m.eval()
        return self

    def parameter_count(self):
        return {k: sum(p.numel() for p in m.parameters()) for k, m in self.modules().items()}

    def tensors(self) -> dict:
        out = {}
        for prefix, m in self.modules().items():
            for name, t in m.state_dict().items():
                out[f"{prefix}.{name}"] = t
        if self.stats is not None:
            out["stats.mean"] = self.stats.mean
            out["stats.std"] = self.stats.std
        return out

    def load_tensors(self, tensors: dict, stats_meta: dict | None = None):
        for prefix, m in self.modules().items():
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            m.load_state_dict(sd)
        if "stats.mean" in tensors:
            meta = stats_meta or {}
            self.stats = LatentStats(tensors["stats.mean"], tensors["stats.std"],
                                     float(meta.get("eps", 1e-5)), int(meta.get("sample_count", 0)))
