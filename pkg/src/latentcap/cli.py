"""Command-line entry point: ``latentcap <command> [flags]``.

Every command writes its artifacts under ``--out`` together with
``config.toml`` (the fully merged config, written before any work starts) and
``manifest.json`` (argv, config digest, input/output hashes, timings).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .config import RunConfig, dump_config, from_dict, load_config
from .evalbench import (
    ARCaptioner, ar_baseline_sample, ar_baseline_train, bleu4, evaluate_captions, latency_sweep,
    write_bench_csv)
from .model import Captioner, derive_seed
from .sampler import Sampler, parse_anchors
from .scenegen import Scene, generate_dataset, read_jsonl, scene_index, write_jsonl
from .textlatent import tokenize
from .trainer import (
    Trainer, load_checkpoint, pretrain_autoencoder, reconstruction_accuracy, resume_trainer,
    save_checkpoint)

log = logging.getLogger("latentcap")

CORPUS = "corpus.jsonl"
BENCH_BUCKETS = (6, 10, 14, 18)


class PrerequisiteError(Exception):
    """A required input artifact is missing or unusable."""


def file_hash(path) -> str:
    """Git-style blob hash of a file's contents."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------- argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="latentcap", description="Latent diffusion captioner for synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False, data=True):
        sp.add_argument("--config", help="TOML config merged over the defaults")
        sp.add_argument("--out", required=True, help="output directory for artifacts and the manifest")
        if data:
            sp.add_argument("--data-dir", help=f"directory holding {CORPUS}")
        if ckpt:
            sp.add_argument("--ckpt", help="input checkpoint")
        sp.add_argument("--seed", type=int, help="override the seed used by this command")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    def sampling(sp):
        sp.add_argument("--steps", type=int, help="number of DDIM steps S")
        sp.add_argument("--eta", type=float, help="DDIM stochasticity in [0, 1]")
        sp.add_argument("--guidance", type=float, help="classifier-free guidance weight w")
        sp.add_argument("--back-refine", metavar="T_FRAC,L_FRAC",
                        help="enable Back&Refine with the given rollback time and renoise fractions")
        sp.add_argument("--mbr", type=int, help="number of candidates for MBR selection")
        sp.add_argument("--split", default="test", choices=["train", "val", "test"], help="scenes to caption")
        sp.add_argument("--limit", type=int, help="caption only the first N scenes of the split")
        sp.add_argument("--batch-size", type=int, default=64, help="scenes per sampling batch")

    sp = sub.add_parser("gen-data", help="generate the synthetic scene/caption corpus")
    common(sp, data=False)

    sp = sub.add_parser("pretrain-ae", help="stage 0: autoencoder pretraining and latent statistics")
    common(sp)
    sp.add_argument("--epochs", type=int, help="override pretrain.epochs")

    sp = sub.add_parser("train", help="diffusion training from a stage-0 (or partial) checkpoint")
    common(sp, ckpt=True)
    sp.add_argument("--epochs", type=int, help="override train.epochs; 0 copies the input checkpoint")

    for name, helptext in (("sample", "caption scenes"), ("infill", "caption scenes with anchored words"),
                           ("eval", "caption a split and score it")):
        sp = sub.add_parser(name, help=helptext)
        common(sp, ckpt=True)
        sampling(sp)
        if name == "infill":
            sp.add_argument("--anchors", required=True, help='anchored words, e.g. "3=red,7=square"')

    sp = sub.add_parser("bench", help="latency and pass-count sweep against an autoregressive baseline")
    common(sp, ckpt=True)
    sp.add_argument("--steps", type=int, help="number of DDIM steps S")
    sp.add_argument("--guidance", type=float, help="classifier-free guidance weight w")
    sp.add_argument("--ar-ckpt", help="trained autoregressive baseline (trained here if omitted)")
    sp.add_argument("--ar-epochs", type=int, default=3, help="epochs when training the baseline here")
    sp.add_argument("--warmup", type=int, default=5, help="discarded timing calls per bucket")
    sp.add_argument("--runs", type=int, default=20, help="timed calls per bucket")
    return p


# ---------------------------------------------------------------- helpers

class Run:
    """Bookkeeping for one command invocation."""

    def __init__(self, args, argv):
        self.args, self.argv = args, argv
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs, self.outputs, self.timings = {}, {}, {}
        self.cfg: RunConfig | None = None
        self.t0 = time.perf_counter()

    def use_input(self, path):
        path = Path(path)
        if not path.exists():
            raise PrerequisiteError(f"missing input artifact: {path}")
        self.inputs[str(path)] = file_hash(path)
        return path

    def produced(self, path):
        self.outputs[str(Path(path))] = file_hash(path)

    def timed(self, name):
        run = self

        class _T:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t, 3)

        return _T()

    def set_config(self, cfg: RunConfig):
        self.cfg = cfg.validate()
        dump_config(cfg, self.out / "config.toml")

    def write_manifest(self):
        self.timings["total"] = round(time.perf_counter() - self.t0, 3)
        man = {
            "command": self.args.command,
            "argv": self.argv,
            "config_digest": self.cfg.digest().hex() if self.cfg else None,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "timings_s": self.timings,
        }
        with open(self.out / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(man, f, indent=2, sort_keys=True)
        return man


def _config(args, overrides=None):
    if args.config and not Path(args.config).exists():
        raise PrerequisiteError(f"config file not found: {args.config}")
    return load_config(args.config, overrides)


def _corpus(run: Run, split=None):
    if not run.args.data_dir:
        raise PrerequisiteError("--data-dir is required (run gen-data first)")
    recs = read_jsonl(run.use_input(Path(run.args.data_dir) / CORPUS))
    return recs if split is None else [r for r in recs if r["split"] == split]


def _arrays(recs, vocab, max_len):
    ids = np.stack([tokenize(r["caption"], vocab, max_len) for r in recs])
    return ids, scene_index([Scene.from_dict(r["scene"]) for r in recs])


def _load(run: Run, stage=None):
    if not run.args.ckpt:
        raise PrerequisiteError(f"--ckpt is required for {run.args.command}")
    path = run.use_input(run.args.ckpt)
    model, meta, tensors = load_checkpoint(path)
    if stage == "trained" and meta["stage"] != "diffusion":
        raise PrerequisiteError(f"{path} is a {meta['stage']} checkpoint; run train first")
    if model.stats is None:
        raise PrerequisiteError(f"{path} carries no latent statistics; run pretrain-ae first")
    return model, meta, tensors


def _sampler_overrides(args):
    s = {}
    for k in ("steps", "eta", "guidance", "mbr", "seed"):
        v = getattr(args, k, None)
        if v is not None:
            s[k] = v
    if getattr(args, "back_refine", None):
        try:
            t_frac, l_frac = (float(v) for v in args.back_refine.split(","))
        except ValueError:
            raise ValueError(f"--back-refine expects T_FRAC,L_FRAC, got {args.back_refine!r}") from None
        s.update(back_refine=True, t_frac=t_frac, l_frac=l_frac)
    return s


# ---------------------------------------------------------------- commands

def cmd_gen_data(run: Run):
    args = run.args
    cfg = _config(args, {"data": {"seed": args.seed}} if args.seed is not None else None)
    run.set_config(cfg)
    dc = cfg.data
    with run.timed("generate"):
        recs = generate_dataset(dc.seed, dc.n_train, dc.n_val, dc.n_test)
    path = run.out / CORPUS
    write_jsonl(recs, path)
    run.produced(path)
    return {"records": len(recs)}


def cmd_pretrain_ae(run: Run):
    args = run.args
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epochs is not None:
        over["pretrain"] = {"epochs": args.epochs}
    cfg = _config(args, over)
    run.set_config(cfg)
    model = Captioner(cfg)
    train = _corpus(run, "train")
    ids, _ = _arrays(train, model.vocab, cfg.text.max_len)
    with run.timed("pretrain"):
        hist = pretrain_autoencoder(model, ids, log_every=50)
    test_ids, _ = _arrays(_corpus(run, "test"), model.vocab, cfg.text.max_len)
    acc = reconstruction_accuracy(model, test_ids)
    path = run.out / "ae.ckpt"
    save_checkpoint(path, model, stage="autoencoder")
    run.produced(path)
    return {"final_loss": hist[-1] if hist else None, "test_reconstruction": acc}


def cmd_train(run: Run):
    args = run.args
    model, meta, tensors = _load(run)
    if args.epochs == 0:
        # identity run: the output is the input, byte for byte
        cfg = model.cfg
        run.set_config(cfg)
        path = run.out / "model.ckpt"
        checkpoint.save(path, *checkpoint.load(args.ckpt))
        run.produced(path)
        return {"steps": 0}
    over = {"train": {}}
    if args.config:
        over["train"] = load_config(args.config).to_dict()["train"]
    if args.epochs is not None:
        over["train"]["epochs"] = args.epochs
    d = model.cfg.to_dict()
    d["train"].update(over["train"])
    if args.seed is not None:
        d["seed"] = args.seed
    model.cfg = from_dict(d)
    run.set_config(model.cfg)
    ids, sidx = _arrays(_corpus(run, "train"), model.vocab, model.max_len)
    if meta["stage"] == "diffusion":
        trainer = resume_trainer(model, meta, tensors, ids, sidx,
                                 total_steps=max(1, len(ids) // model.cfg.train.batch_size) * model.cfg.train.epochs)
    else:
        trainer = Trainer(model, ids, sidx)
    with run.timed("train"):
        trace = trainer.run(metrics_path=run.out / "metrics.csv", log_every=50)
    path = run.out / "model.ckpt"
    save_checkpoint(path, model, trainer, stage="diffusion")
    run.produced(path)
    run.produced(run.out / "metrics.csv")
    return {"steps": trainer.step, "final_loss": trace[-1]["loss"] if trace else None}


def _generate(run: Run, anchors=None):
    args = run.args
    model, _, _ = _load(run, stage="trained")
    cfg = model.cfg
    d = cfg.to_dict()
    if args.config:
        d["sampler"] = load_config(args.config).to_dict()["sampler"]
    d["sampler"].update(_sampler_overrides(args))
    cfg = from_dict(d)
    model.cfg = cfg
    run.set_config(cfg)
    recs = _corpus(run, args.split)
    if args.limit is not None:
        recs = recs[: args.limit]
    if not recs:
        raise ValueError(f"no scenes in split {args.split!r}")
    sampler = Sampler(model, cfg.sampler)
    seed = derive_seed(cfg.sampler.seed, "sampling")
    gens = []
    with run.timed("sample"):
        for i in range(0, len(recs), args.batch_size):
            chunk = recs[i:i + args.batch_size]
            cond = model.cond(scene_index([Scene.from_dict(r["scene"]) for r in chunk]))
            if anchors is None:
                gens += sampler.sample(cond, seed=seed + i)
            else:
                gens += sampler.infill(cond, anchors, seed=seed + i)
    path = run.out / "generations.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        for i, g in enumerate(gens):
            f.write(json.dumps({"index": i, **g.to_json()}, sort_keys=True) + "\n")
    run.produced(path)
    return model, recs, gens


def cmd_sample(run: Run):
    _, recs, gens = _generate(run)
    return {"generated": len(gens)}


def cmd_infill(run: Run):
    anchors = parse_anchors(run.args.anchors)
    model, recs, gens = _generate(run, anchors)
    want = {p: model.vocab.stoi[w] for p, w in anchors.items()}
    hits = sum(all(g.tokens[p] == t for p, t in want.items()) for g in gens)
    return {"generated": len(gens), "anchor_hit_rate": hits / len(gens)}


def cmd_eval(run: Run):
    model, recs, gens = _generate(run)
    refs = [r["caption"] for r in recs]
    rep = evaluate_captions([g.caption for g in gens], refs, [g.tokens for g in gens],
                            [tokenize(r, model.vocab, model.max_len) for r in refs], model.vocab)
    rep.forward_passes = gens[0].forward_passes
    rep.wall_ms_median = float(np.median([g.wall_ms for g in gens]))
    path = run.out / "eval.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rep.to_dict(), f, indent=2, sort_keys=True)
    run.produced(path)
    return {"bleu4": rep.bleu4, "token_accuracy": rep.token_accuracy, "length_accuracy": rep.length_accuracy}


def bucket_of(n_tokens, buckets=BENCH_BUCKETS):
    """Nearest length bucket for a caption of ``n_tokens`` (specials included); ties go low."""
    return min(buckets, key=lambda b: (abs(b - n_tokens), b))


def cmd_bench(run: Run):
    args = run.args
    model, _, _ = _load(run, stage="trained")
    d = model.cfg.to_dict()
    d["sampler"].update(_sampler_overrides(args))
    model.cfg = cfg = from_dict(d)
    run.set_config(cfg)
    vocab = model.vocab
    test = _corpus(run, "test")
    ar = ARCaptioner(len(vocab), cfg.diffuser.dim, cfg.diffuser.blocks, cfg.diffuser.heads, cfg.diffuser.ffn,
                     model.max_len)
    if args.ar_ckpt:
        meta, tensors, _ = checkpoint.load(run.use_input(args.ar_ckpt))
        ar.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("ar.")})
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, "ar"))
            ar = ARCaptioner(len(vocab), cfg.diffuser.dim, cfg.diffuser.blocks, cfg.diffuser.heads,
                             cfg.diffuser.ffn, model.max_len)
        ids, sidx = _arrays(_corpus(run, "train"), vocab, model.max_len)
        with run.timed("ar_train"):
            ar_baseline_train(ar, ids, sidx, vocab, epochs=args.ar_epochs, seed=derive_seed(cfg.seed, "ar"))
        path = run.out / "ar.ckpt"
        checkpoint.save(path, {"stage": "ar", "vocab": vocab.itos},
                        {f"ar.{k}": v for k, v in ar.state_dict().items()}, cfg.digest())
        run.produced(path)
    ar.eval()

    by_bucket = {b: [] for b in BENCH_BUCKETS}
    for r in test:
        by_bucket[bucket_of(len(r["caption"].split()) + 2)].append(r)
    sampler = Sampler(model, cfg.sampler)

    def diffusion_runner(b):
        recs = by_bucket[b]
        cond_all = model.cond(scene_index([Scene.from_dict(r["scene"]) for r in recs]))

        def one():
            return sampler.sample(cond_all[:1])[0].forward_passes

        def score():
            gens = sampler.sample(cond_all)
            return bleu4([g.caption for g in gens], [[r["caption"]] for r in recs])

        return one, score

    def ar_runner(b):
        recs = by_bucket[b]
        sidx = scene_index([Scene.from_dict(r["scene"]) for r in recs])

        def one():
            start = ar.counter.value
            ar.greedy(sidx[:1], vocab)
            return ar.counter.value - start

        def score():
            caps, _, _ = ar_baseline_sample(ar, sidx, vocab)
            return bleu4(caps, [[r["caption"]] for r in recs])

        return one, score

    with torch.no_grad(), run.timed("sweep"):
        rows = latency_sweep([b for b in BENCH_BUCKETS if by_bucket[b]],
                             {"diffusion": diffusion_runner, "autoregressive": ar_runner},
                             args.warmup, args.runs)
    path = run.out / "bench.csv"
    write_bench_csv(rows, path)
    run.produced(path)
    return {"rows": len(rows)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-ae": cmd_pretrain_ae,
    "train": cmd_train,
    "sample": cmd_sample,
    "infill": cmd_infill,
    "eval": cmd_eval,
    "bench": cmd_bench,
}

EXIT_CODES = {PrerequisiteError: 2, FileNotFoundError: 2, checkpoint.ChecksumError: 3,
              checkpoint.CheckpointError: 4, ValueError: 5}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("LADX_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        run = Run(args, argv)
        result = COMMANDS[args.command](run)
        man = run.write_manifest()
    except Exception as e:  # reported as one JSON line, never a traceback
        code = next((c for t, c in EXIT_CODES.items() if isinstance(e, t)), 1)
        print(json.dumps({"ok": False, "command": args.command, "error": type(e).__name__,
                          "message": str(e)}), file=sys.stderr)
        return code
    print(json.dumps({"ok": True, "command": args.command, "out": str(run.out),
                      "config_digest": man["config_digest"], **(result or {})}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
