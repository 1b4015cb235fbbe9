"""Autoencoder pretraining, the two-part diffusion loss and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .config import RunConfig, TrainConfig, from_dict
from .model import Captioner, derive_seed
from .schedule import q_sample
from .textlatent import (Vocabulary, encode_latent, estimate_stats, reassign, special_mask)

log = logging.getLogger(__name__)

IGNORE = -100


def latent_loss(x0_hat, x0):
    return (x0_hat - x0).pow(2).mean()


def caption_loss(logits, tokens):
    """Mean token NLL over all positions, [PAD] targets included."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens.reshape(-1),
                           ignore_index=IGNORE)


def warmup_linear_lr(step, total_steps, peak, warmup_ratio):
    """Learning rate for 1-indexed update ``step``: linear warmup then linear decay to 0."""
    warm = max(1, math.ceil(warmup_ratio * total_steps))
    if step <= warm:
        return peak * step / warm
    return peak * max(0.0, (total_steps - step) / max(1, total_steps - warm))


# ---------------------------------------------------------------- stage 0

def corrupt_for_pretraining(ids, vocab: Vocabulary, gen, mask_prob=0.5, seq_prob=0.5, swap_prob=0.1):
    """Randomly mask / swap content tokens in half the sequences.

    The autoencoder is still trained to reproduce its (corrupted) input, so it
    learns to encode anchor tokens seen in partial contexts. Masked positions
    are ignored in the loss.
    """
    content = ~special_mask(ids, vocab)
    pick_seq = torch.rand(ids.shape[0], 1, generator=gen) < seq_prob
    r = torch.rand(ids.shape, generator=gen)
    to_mask = content & pick_seq & (r < mask_prob)
    to_swap = content & pick_seq & (r >= mask_prob) & (r < mask_prob + swap_prob)
    words = torch.tensor(vocab.content_ids)
    rand_words = words[torch.randint(len(words), ids.shape, generator=gen)]
    inp = torch.where(to_swap, rand_words, ids)
    inp = inp.masked_fill(to_mask, vocab.mask_id)
    target = inp.masked_fill(to_mask, IGNORE)
    return inp, target


def batch_normalize(x, mask):
    rows = x[~mask].detach()
    mean = rows.mean(0)
    std = rows.std(0, unbiased=False)
    return (x - mean) / (std + 1e-5)


def pretrain_autoencoder(model: Captioner, ids, log_every=50):
    """Reconstruction pretraining of the whole text stack, then latent stats.

    Normalisation uses detached per-batch moments while the encoder is still
    moving; the fixed statistics are estimated once training is done.
    """
    pc = model.cfg.pretrain
    ae, vocab = model.ae, model.vocab
    ids = torch.as_tensor(ids)
    gen = torch.Generator().manual_seed(derive_seed(model.cfg.seed, "pretrain"))
    steps_per_epoch = len(ids) // pc.batch_size
    total = steps_per_epoch * pc.epochs
    opt = torch.optim.AdamW(ae.parameters(), lr=pc.lr, betas=(0.9, 0.999), weight_decay=0.0)
    ae.train()
    history = []
    step = 0
    for epoch in range(pc.epochs):
        perm = torch.randperm(len(ids), generator=gen)
        for b in range(steps_per_epoch):
            step += 1
            for g in opt.param_groups:
                g["lr"] = warmup_linear_lr(step, total, pc.lr, 0.1)
            batch = ids[perm[b * pc.batch_size:(b + 1) * pc.batch_size]]
            inp, target = corrupt_for_pretraining(batch, vocab, gen, pc.mask_prob)
            mask = special_mask(inp, vocab)
            z = reassign(batch_normalize(ae.encode(inp), mask), mask)
            loss = caption_loss(ae.decode(z), target)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
            if log_every and step % log_every == 0:
                log.info("pretrain step %d/%d loss %.4f", step, total, history[-1])
    ae.eval()
    n_stats = max(1000, min(pc.stats_samples, len(ids)))
    model.stats = estimate_stats(ae, ids[:n_stats], vocab)
    return history


@torch.no_grad()
def reconstruction_accuracy(model: Captioner, ids):
    ids = torch.as_tensor(ids)
    x0 = encode_latent(model.ae, ids, model.stats, model.vocab)
    pred = model.ae.decode(x0).argmax(-1)
    return float((pred == ids).double().mean())


# ---------------------------------------------------------------- diffusion training

class Trainer:
    """Single-writer diffusion training loop over a fixed training set.

    ``ids`` are (N, L) token ids and ``scene_idx`` the (N, 10) scene symbols.
    Batch order is a function of (seed, epoch); the noise stream is a saved
    generator, so a resumed run reproduces the uninterrupted one.
    """

    def __init__(self, model: Captioner, ids, scene_idx, total_steps=None):
        self.model = model
        self.cfg: TrainConfig = model.cfg.train
        self.ids = torch.as_tensor(ids)
        self.scene_idx = torch.as_tensor(scene_idx)
        self.steps_per_epoch = max(1, len(self.ids) // self.cfg.batch_size)
        self.total_steps = total_steps if total_steps is not None else self.steps_per_epoch * self.cfg.epochs
        self.step = 0
        self.noise_gen = torch.Generator().manual_seed(derive_seed(model.cfg.seed, "noise"))
        model.ae.freeze_backbone()
        self.named_params = [(f"ae.{n}", p) for n, p in model.ae.lm_head.named_parameters(prefix="lm_head")]
        self.named_params += [(f"cond.{n}", p) for n, p in model.cond.named_parameters()]
        self.named_params += [(f"diffuser.{n}", p) for n, p in model.diffuser.named_parameters()]
        self.opt = torch.optim.AdamW([p for _, p in self.named_params], lr=0.0, betas=(0.9, 0.999),
                                     weight_decay=self.cfg.weight_decay)
        self._x0 = None
        self._perm_epoch = None
        self._perm = None

    def lr_at(self, step):
        return warmup_linear_lr(step, self.total_steps, self.cfg.peak_lr, self.cfg.warmup_ratio)

    @property
    def x0_all(self):
        if self._x0 is None:
            # encoder is frozen, so clean latents are computed once
            self._x0 = encode_latent(self.model.ae, self.ids, self.model.stats, self.model.vocab)
        return self._x0

    def batch_indices(self, step):
        epoch, b = divmod(step, self.steps_per_epoch)
        if self._perm_epoch != epoch:
            rng = np.random.default_rng(derive_seed(self.model.cfg.seed, "shuffle", epoch))
            self._perm = torch.from_numpy(rng.permutation(len(self.ids)))
            self._perm_epoch = epoch
        bs = self.cfg.batch_size
        return self._perm[b * bs:(b + 1) * bs]

    def compute_loss(self, x0, tokens, scene_idx, gen):
        m, c = self.model, self.cfg
        B = x0.shape[0]
        T = m.schedule.total_steps
        t = torch.randint(1, T + 1, (B,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = q_sample(x0, t, eps, m.schedule)
        cond = m.cond(scene_idx)
        drop = torch.rand(B, generator=gen) < c.cfg_drop_prob
        cond = torch.where(drop[:, None, None], m.cond.null_condition(B), cond)
        self_cond = torch.zeros_like(x0)
        if float(torch.rand(1, generator=gen)) < c.self_cond_prob:
            with torch.no_grad():
                self_cond = m.diffuser(x_t, cond, t, self_cond).detach()
        x0_hat = m.diffuser(x_t, cond, t, self_cond)
        l_lat = latent_loss(x0_hat, x0)
        l_cap = caption_loss(m.ae.decode(x0_hat), tokens)
        return l_lat + c.lam * l_cap, l_lat, l_cap

    def train_step(self, batch=None):
        """One optimizer update; ``batch`` defaults to the scheduled minibatch."""
        if batch is None:
            idx = self.batch_indices(self.step)
            x0, tokens, sidx = self.x0_all[idx], self.ids[idx], self.scene_idx[idx]
        else:
            x0, tokens, sidx = batch
        self.model.diffuser.train()
        self.model.cond.train()
        lr = self.lr_at(self.step + 1)
        for g in self.opt.param_groups:
            g["lr"] = lr
        loss, l_lat, l_cap = self.compute_loss(x0, tokens, sidx, self.noise_gen)
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite loss at step {self.step + 1}: latent={float(l_lat.detach())} caption={float(l_cap.detach())} lr={lr}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        if self.cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_([p for _, p in self.named_params], self.cfg.grad_clip)
        self.opt.step()
        self.step += 1
        lat, cap = float(l_lat.detach()), float(l_cap.detach())
        return {"step": self.step, "loss": lat + self.cfg.lam * cap, "latent_loss": lat,
                "caption_loss": cap, "lr": lr}

    def run(self, n_steps=None, metrics_path=None, log_every=50):
        end = self.total_steps if n_steps is None else min(self.total_steps, self.step + n_steps)
        writer = None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            new = not metrics_path.exists()
            fh = open(metrics_path, "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(["step", "loss", "latent_loss", "caption_loss", "lr"])
        trace = []
        try:
            while self.step < end:
                m = self.train_step()
                trace.append(m)
                if writer:
                    writer.writerow([m["step"], repr(m["loss"]), repr(m["latent_loss"]),
                                     repr(m["caption_loss"]), repr(m["lr"])])
                if log_every and m["step"] % log_every == 0:
                    log.info("step %d/%d loss %.4f (latent %.4f caption %.4f) lr %.2e", m["step"],
                             self.total_steps, m["loss"], m["latent_loss"], m["caption_loss"], m["lr"])
        finally:
            if writer:
                fh.close()
        self.model.diffuser.eval()
        self.model.cond.eval()
        return trace

    def state_tensors(self):
        out = {}
        for name, p in self.named_params:
            st = self.opt.state.get(p)
            if st:
                out[f"optim.{name}.exp_avg"] = st["exp_avg"]
                out[f"optim.{name}.exp_avg_sq"] = st["exp_avg_sq"]
                out[f"optim.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float32).reshape(1)
        out["rng.noise"] = self.noise_gen.get_state()
        return out

    def load_state(self, tensors, step):
        for name, p in self.named_params:
            key = f"optim.{name}"
            if f"{key}.exp_avg" in tensors:
                self.opt.state[p] = {
                    "step": tensors[f"{key}.step"].reshape(()).clone(),
                    "exp_avg": tensors[f"{key}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"{key}.exp_avg_sq"].clone(),
                }
        if "rng.noise" in tensors:
            self.noise_gen.set_state(tensors["rng.noise"].clone())
        self.step = int(step)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Captioner, trainer: Trainer | None = None, stage="diffusion",
                    extra_tensors=None, meta_extra=None):
    meta = {
        "stage": stage,
        "config": model.cfg.to_dict(),
        "schedule": model.schedule.to_dict(),
        "vocab": model.vocab.itos,
        "step": trainer.step if trainer else 0,
        "total_steps": trainer.total_steps if trainer else 0,
    }
    if model.stats is not None:
        meta["stats"] = {"eps": model.stats.eps, "sample_count": model.stats.sample_count}
    if meta_extra:
        meta.update(meta_extra)
    tensors = model.tensors()
    if trainer is not None:
        tensors.update(trainer.state_tensors())
    if extra_tensors:
        tensors.update(extra_tensors)
    checkpoint.save(path, meta, tensors, model.cfg.digest())


def load_checkpoint(path, counter=None):
    """Returns ``(model, meta, tensors)``; rebuild a Trainer with ``resume_trainer``."""
    meta, tensors, digest = checkpoint.load(path)
    cfg = from_dict(meta["config"])
    if cfg.digest() != digest:
        raise checkpoint.CheckpointError("config digest in header does not match stored config")
    model = Captioner(cfg, Vocabulary(meta["vocab"][4:]), counter=counter)
    model.load_tensors(tensors, meta.get("stats"))
    model.eval()
    return model, meta, tensors


def resume_trainer(model: Captioner, meta, tensors, ids, scene_idx, total_steps=None):
    tr = Trainer(model, ids, scene_idx, total_steps=total_steps or meta.get("total_steps") or None)
    tr.load_state(tensors, meta.get("step", 0))
    return tr


def with_config(cfg: RunConfig, **sections):
    d = cfg.to_dict()
    for k, v in sections.items():
        d[k].update(v)
    return from_dict(d)
