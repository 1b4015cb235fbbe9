"""BLEU@4, caption metrics, an autoregressive baseline and latency sweeps."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffuser import FORWARD_PASSES, PassCounter
from .layers import Block
from .scenegen import ConditionEncoder
from .textlatent import Vocabulary, strip_specials

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- BLEU

def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu_stats(hypothesis: str, references):
    """Clipped n-gram matches/totals for n = 1..4, hypothesis length and closest ref length."""
    hyp = hypothesis.split()
    refs = [r.split() for r in references]
    matches, totals = [0] * 4, [0] * 4
    for n in range(1, 5):
        h = _ngrams(hyp, n)
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matches[n - 1] = sum(min(c, max_ref[g]) for g, c in h.items())
        totals[n - 1] = max(0, len(hyp) - n + 1)
    ref_len = min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
    return matches, totals, len(hyp), ref_len


def bleu_from_stats(matches, totals, hyp_len, ref_len):
    if hyp_len == 0 or min(totals) == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def bleu4(hypotheses, reference_lists) -> float:
    """Corpus BLEU@4, uniform weights, brevity penalty, no smoothing."""
    if len(hypotheses) != len(reference_lists):
        raise ValueError("hypotheses and references differ in count")
    if not hypotheses:
        raise ValueError("empty corpus")
    M, T = [0] * 4, [0] * 4
    c = r = 0
    for hyp, refs in zip(hypotheses, reference_lists):
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        m, t, hl, rl = bleu_stats(hyp, refs)
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        c += hl
        r += rl
    return bleu_from_stats(M, T, c, r)


def sentence_bleu(hypothesis, references):
    return bleu_from_stats(*bleu_stats(hypothesis, references))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    bleu4: float
    token_accuracy: float
    length_accuracy: float
    n: int
    buckets: dict = field(default_factory=dict)
    forward_passes: int = 0
    wall_ms_median: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def token_accuracy(pred_ids, ref_ids, vocab: Vocabulary):
    """Per-position accuracy over reference positions 1..[SEP] (content plus boundary)."""
    hit = tot = 0
    for p, r in zip(pred_ids, ref_ids):
        r = list(r)
        end = r.index(vocab.sep_id)
        hit += sum(int(p[i]) == int(r[i]) for i in range(1, end + 1))
        tot += end
    return hit / max(1, tot)


def evaluate_captions(hyps, refs, pred_ids=None, ref_ids=None, vocab=None) -> EvalReport:
    length_ok = [len(h.split()) == len(r.split()) for h, r in zip(hyps, refs)]
    buckets = {}
    by_len = {}
    for h, r in zip(hyps, refs):
        by_len.setdefault(len(r.split()), []).append((h, r))
    for n, pairs in sorted(by_len.items()):
        buckets[str(n)] = {"n": len(pairs), "bleu4": bleu4([h for h, _ in pairs], [[r] for _, r in pairs])}
    tok = token_accuracy(pred_ids, ref_ids, vocab) if pred_ids is not None else float("nan")
    return EvalReport(bleu4=bleu4(hyps, [[r] for r in refs]), token_accuracy=tok,
                      length_accuracy=sum(length_ok) / len(length_ok), n=len(hyps), buckets=buckets)


# ---------------------------------------------------------------- AR baseline

class ARCaptioner(nn.Module):
    """Left-to-right transformer decoder with cross-attention to the condition slots."""

    def __init__(self, vocab_size, dim=256, blocks=6, heads=4, ffn=1024, max_len=24,
                 counter: PassCounter | None = None):
        super().__init__()
        self.max_len = max_len
        self.cond = ConditionEncoder(dim)
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, ffn, cross=True) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)
        self.counter = counter if counter is not None else FORWARD_PASSES

    def forward(self, ids, cond):
        h = self.tok_emb(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            h = blk(h, cond, causal=True)
        return self.head(self.norm(h))

    @torch.no_grad()
    def greedy(self, scene_idx, vocab: Vocabulary):
        """Greedy decoding; one counted pass per emitted token ([SEP] included)."""
        cond = self.cond(scene_idx)
        B = cond.shape[0]
        ids = torch.full((B, 1), vocab.cls_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        emitted = torch.zeros(B, dtype=torch.long)
        while ids.shape[1] < self.max_len and not bool(done.all()):
            self.counter.add(1)
            nxt = self(ids, cond)[:, -1].argmax(-1)
            nxt = torch.where(done, torch.full_like(nxt, vocab.pad_id), nxt)
            emitted += (~done).long()
            done |= nxt == vocab.sep_id
            ids = torch.cat([ids, nxt[:, None]], dim=1)
        pad = torch.full((B, self.max_len - ids.shape[1]), vocab.pad_id, dtype=torch.long)
        return torch.cat([ids, pad], dim=1), emitted


def ar_baseline_train(model: ARCaptioner, ids, scene_idx, vocab, epochs=3, batch_size=64, lr=5e-4,
                      seed=0, log_every=100):
    ids, scene_idx = torch.as_tensor(ids), torch.as_tensor(scene_idx)
    gen = torch.Generator().manual_seed(seed)
    spe = len(ids) // batch_size
    total = spe * epochs
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
    from .trainer import warmup_linear_lr

    model.train()
    trace = []
    step = 0
    for _ in range(epochs):
        perm = torch.randperm(len(ids), generator=gen)
        for b in range(spe):
            step += 1
            for g in opt.param_groups:
                g["lr"] = warmup_linear_lr(step, total, lr, 0.1)
            sel = perm[b * batch_size:(b + 1) * batch_size]
            x, sidx = ids[sel], scene_idx[sel]
            target = x[:, 1:].masked_fill(x[:, 1:] == vocab.pad_id, -100)
            logits = model(x[:, :-1], model.cond(sidx))
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1),
                                   ignore_index=-100)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            trace.append(float(loss.detach()))
            if log_every and step % log_every == 0:
                log.info("ar step %d/%d loss %.4f", step, total, trace[-1])
    model.eval()
    return trace


def ar_baseline_sample(model: ARCaptioner, scene_idx, vocab):
    ids, emitted = model.greedy(torch.as_tensor(scene_idx), vocab)
    return [strip_specials(r.tolist(), vocab) for r in ids], ids, emitted


# ---------------------------------------------------------------- timing / sweeps

def time_call(fn, warmup=5, runs=20):
    """Median wall time in ms over ``runs`` calls after ``warmup`` discarded calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    return statistics.median(times)


BENCH_COLUMNS = ["model", "length_bucket", "mean_wall_ms", "forward_passes", "bleu4"]


def latency_sweep(buckets, runners, warmup=5, runs=20):
    """Per (model, bucket): timed single-scene generation, pass count and bucket BLEU@4.

    ``runners`` maps a model name to ``fn(bucket) -> (generate_one, evaluate)`` where
    ``generate_one()`` produces one caption and returns its forward-pass count and
    ``evaluate()`` returns BLEU@4 on that bucket's scenes.
    """
    rows = []
    for name, make in runners.items():
        for b in buckets:
            gen_one, evaluate = make(b)
            passes = gen_one()
            wall = time_call(gen_one, warmup, runs)
            rows.append({"model": name, "length_bucket": b, "mean_wall_ms": round(wall, 3),
                         "forward_passes": int(passes), "bleu4": round(float(evaluate()), 6)})
            log.info("bench %s bucket %s: %.1f ms, %d passes", name, b, wall, passes)
    return rows


def write_bench_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in BENCH_COLUMNS})
