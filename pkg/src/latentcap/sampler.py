"""DDIM generation with guidance and self-conditioning, Back&Refine, infilling and MBR."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import SamplerConfig
from .diffuser import cfg_denoise
from .schedule import NoiseSchedule
from .textlatent import encode_latent, strip_specials


def timesteps(T: int, S: int) -> np.ndarray:
    """Uniform-stride subsequence tau_1 < ... < tau_S = T."""
    if not 1 <= S <= T:
        raise ValueError(f"need 1 <= steps <= {T}, got {S}")
    taus = np.round(np.linspace(T / S, T, S)).astype(np.int64)
    assert np.all(np.diff(taus) > 0) and taus[-1] == T
    return taus


def ddim_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab_t, ab_prev = sched.alpha_bars[t], sched.alpha_bars[t_prev]
    # effective beta over the skipped interval; equals beta_t when t_prev = t - 1
    beta = 1.0 - ab_t / ab_prev
    return math.sqrt(max(0.0, eta * (1.0 - ab_prev) / (1.0 - ab_t) * beta))


def ddim_step(x_t, x0_hat, t: int, t_prev: int, sched: NoiseSchedule, eta=0.0, noise=None):
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ab_t, ab_prev = float(sched.alpha_bars[t]), float(sched.alpha_bars[t_prev])
    if 1.0 - ab_t <= 0.0:
        raise ValueError(f"alpha_bar at t={t} is 1; cannot infer the noise direction")
    sigma = ddim_sigma(sched, t, t_prev, eta)
    eps_dir = (x_t - math.sqrt(ab_t) * x0_hat) / math.sqrt(1.0 - ab_t)
    out = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(0.0, 1.0 - ab_prev - sigma ** 2)) * eps_dir
    if sigma > 0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        out = out + sigma * noise
    return out


def keep_count(l_valid: int, l_frac: float) -> int:
    return math.ceil((1.0 - l_frac) * l_valid - 1e-9)


def select_confident(confidence, l_frac):
    """Boolean keep mask over positions 1..L-1 (position 0, [CLS], never eligible)."""
    B, L = confidence.shape
    k = keep_count(L - 1, l_frac)
    order = torch.argsort(confidence[:, 1:], dim=1, descending=True, stable=True)
    keep = torch.zeros(B, L, dtype=torch.bool)
    keep[:, 1:].scatter_(1, order[:, :k], True)
    return keep


@dataclass
class Generation:
    caption: str
    tokens: list
    forward_passes: int
    wall_ms: float
    confidences: list
    kept_positions: list | None = None
    candidates: list | None = None

    def to_json(self):
        d = {"caption": self.caption, "forward_passes": self.forward_passes,
             "wall_ms": round(self.wall_ms, 3),
             "confidences": [round(float(c), 6) for c in self.confidences]}
        if self.kept_positions is not None:
            d["kept_positions"] = self.kept_positions
        return d


@dataclass
class LoopState:
    x: torch.Tensor
    x0_hat: torch.Tensor


class Sampler:
    """Runs the reverse process for a batch of condition features.

    ``denoiser`` defaults to guided prediction through the model's diffuser;
    tests substitute a callable ``(x_t, t, self_cond) -> x0_hat``.
    """

    def __init__(self, model, cfg: SamplerConfig | None = None, denoiser=None):
        self.model = model
        self.cfg = (cfg or SamplerConfig()).validate()
        self.schedule: NoiseSchedule = model.schedule
        self.denoiser = denoiser

    # -- core loop -------------------------------------------------------
    def _predict(self, x, cond, null, t, self_cond):
        if self.denoiser is not None:
            return self.denoiser(x, t, self_cond)
        return cfg_denoise(self.model.diffuser, x, cond, null, t, self_cond, self.cfg.guidance)

    def _noise(self, shape, gen, dtype):
        return torch.randn(shape, generator=gen, dtype=dtype)

    def run_loop(self, x, cond, null, gen, *, stop_at=None, anchor_mask=None, anchor_values=None,
                 on_step=None):
        """Denoise from t = T. Stops after the step at ``stop_at`` (a tau) if given.

        After every step rows under ``anchor_mask`` are overwritten by ``anchor_values``.
        """
        taus = timesteps(self.schedule.total_steps, self.cfg.steps)
        self_cond = torch.zeros_like(x)
        x0_hat = self_cond
        for i in range(len(taus) - 1, -1, -1):
            t = int(taus[i])
            t_prev = int(taus[i - 1]) if i > 0 else 0
            x0_hat = self._predict(x, cond, null, t, self_cond)
            self_cond = x0_hat
            if stop_at is not None and t == stop_at:
                return LoopState(x, x0_hat)
            noise = None
            if self.cfg.eta > 0:
                noise = self.schedule.noise_factor * self._noise(x.shape, gen, x.dtype)
            x = ddim_step(x, x0_hat, t, t_prev, self.schedule, self.cfg.eta, noise)
            if anchor_mask is not None:
                x = torch.where(anchor_mask[..., None], anchor_values, x)
            if on_step is not None:
                on_step(t, t_prev, x, x0_hat)
        return LoopState(x, x0_hat)

    def back_refine_time(self):
        taus = timesteps(self.schedule.total_steps, self.cfg.steps)
        target = self.cfg.t_frac * self.schedule.total_steps
        return int(taus[np.argmin(np.abs(taus - target))])

    # -- public API ------------------------------------------------------
    @torch.no_grad()
    def generate_latent(self, cond, gen, anchor_mask=None, anchor_values=None, on_step=None):
        """Returns (final latent, keep mask or None)."""
        m = self.model
        B, L, d = cond.shape[0], m.max_len, m.cfg.text.dim
        null = m.cond.null_condition(B).to(cond.dtype) if self.denoiser is None else None
        F = self.schedule.noise_factor
        x = F * self._noise((B, L, d), gen, cond.dtype)
        if anchor_mask is not None:
            x = torch.where(anchor_mask[..., None], anchor_values, x)
        keep = None
        if self.cfg.back_refine:
            st = self.run_loop(x, cond, null, gen, stop_at=self.back_refine_time(),
                               anchor_mask=anchor_mask, anchor_values=anchor_values, on_step=on_step)
            x, keep, anchor_mask, anchor_values = self.rollback(st.x0_hat, gen, anchor_mask, anchor_values)
        st = self.run_loop(x, cond, null, gen, anchor_mask=anchor_mask, anchor_values=anchor_values,
                           on_step=on_step)
        return st.x, keep

    @torch.no_grad()
    def rollback(self, x0_hat, gen, anchor_mask=None, anchor_values=None):
        """Keep the most confident rows of ``x0_hat`` and renoise the rest.

        Returns the restart latent for t = T, the keep mask, and the mask/values
        to re-insert after every refine step (user anchors stay anchored).
        """
        conf = self.model.ae.decode(x0_hat).softmax(-1).amax(-1)
        keep = select_confident(conf, self.cfg.l_frac)
        mask, values = keep, x0_hat
        if anchor_mask is not None:
            mask = keep | anchor_mask
            values = torch.where(anchor_mask[..., None], anchor_values, x0_hat)
        fresh = self.schedule.noise_factor * self._noise(x0_hat.shape, gen, x0_hat.dtype)
        return torch.where(mask[..., None], values, fresh), keep, mask, values

    @torch.no_grad()
    def decode(self, x):
        probs = self.model.ae.decode(x).softmax(-1)
        conf, tok = probs.max(-1)
        return tok, conf

    @torch.no_grad()
    def sample(self, cond, seed=None, anchor_mask=None, anchor_values=None):
        """Generate one caption per row of ``cond`` (B, M, D)."""
        seed = self.cfg.seed if seed is None else seed
        k = self.cfg.mbr
        counter = self.model.diffuser.counter
        B = cond.shape[0]
        all_tokens, all_conf, all_keep = [], [], []
        start_passes, t0 = counter.value, time.perf_counter()
        for j in range(k):
            gen = torch.Generator().manual_seed(int(seed) + j)
            x, keep = self.generate_latent(cond, gen, anchor_mask, anchor_values)
            tok, conf = self.decode(x)
            all_tokens.append(tok)
            all_conf.append(conf)
            all_keep.append(keep)
        passes = counter.value - start_passes
        wall = (time.perf_counter() - t0) * 1000.0 / B
        vocab = self.model.vocab
        out = []
        for b in range(B):
            caps = [strip_specials(all_tokens[j][b].tolist(), vocab) for j in range(k)]
            j = mbr_select(caps)[1] if k > 1 else 0
            keep = all_keep[j]
            out.append(Generation(
                caption=caps[j], tokens=all_tokens[j][b].tolist(), forward_passes=passes,
                wall_ms=wall, confidences=all_conf[j][b].tolist(),
                kept_positions=None if keep is None else keep[b].nonzero().flatten().tolist(),
                candidates=caps if k > 1 else None))
        return out

    def anchor_latents(self, anchors: dict, batch: int):
        return build_anchors(self.model, anchors, batch)

    @torch.no_grad()
    def infill(self, cond, anchors: dict, seed=None):
        """Generate with ``anchors`` ({position: word}) re-inserted after every step."""
        if not anchors:
            return self.sample(cond, seed)
        mask, values = self.anchor_latents(anchors, cond.shape[0])
        return self.sample(cond, seed, mask, values.to(cond.dtype))


def parse_anchors(text: str) -> dict:
    """``"3=red,7=square"`` -> {3: "red", 7: "square"}."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        pos, _, word = part.partition("=")
        pos = int(pos)
        if pos in out and out[pos] != word:
            raise ValueError(f"conflicting anchors at position {pos}")
        out[pos] = word
    return out


@torch.no_grad()
def build_anchors(model, anchors, batch=1):
    """Latent rows for anchor words, encoded in context with [MASK] at blank positions."""
    vocab, L = model.vocab, model.max_len
    ids = torch.full((L,), vocab.mask_id, dtype=torch.long)
    ids[0] = vocab.cls_id
    mask = torch.zeros(L, dtype=torch.bool)
    for pos, word in dict(anchors).items():
        pos = int(pos)
        if not 0 <= pos < L:
            raise ValueError(f"anchor position {pos} outside 0..{L - 1}")
        if word not in vocab.stoi:
            raise ValueError(f"anchor word {word!r} not in vocabulary")
        ids[pos] = vocab.stoi[word]
        mask[pos] = True
    z = encode_latent(model.ae, ids[None], model.stats, vocab)[0]
    return mask.expand(batch, L).clone(), z.expand(batch, L, z.shape[-1]).clone()


def mbr_select(candidates):
    """Candidate with the highest mean sentence-BLEU against the others.

    Returns ``(caption, index)``; ties go to the lowest index.
    """
    from .evalbench import sentence_bleu

    if not candidates:
        raise ValueError("mbr_select needs at least one candidate")
    k = len(candidates)
    if k == 1:
        return candidates[0], 0
    best, best_i = -1.0, 0
    for i, c in enumerate(candidates):
        score = sum(sentence_bleu(c, [candidates[j]]) for j in range(k) if j != i) / (k - 1)
        if score > best:
            best, best_i = score, i
    return candidates[best_i], best_i
