import numpy as np
import pytest
import torch

from latentcap.config import RunConfig, from_dict
from latentcap.model import Captioner
from latentcap.scenegen import generate_dataset
from latentcap.textlatent import tokenize

torch.set_num_threads(1)


def tiny_config(**over):
    d = {
        "seed": 3,
        "data": {"seed": 5, "n_train": 1200, "n_val": 32, "n_test": 32},
        "schedule": {"steps": 200},
        "text": {"dim": 32, "layers": 2, "split": 1, "heads": 2, "ffn": 64},
        "diffuser": {"blocks": 2, "dim": 32, "heads": 2, "ffn": 64},
        "pretrain": {"epochs": 4, "batch_size": 64, "lr": 3e-3, "stats_samples": 1000},
        "train": {"batch_size": 32, "epochs": 1, "peak_lr": 1e-3},
    }
    for k, v in over.items():
        if isinstance(v, dict):
            d.setdefault(k, {}).update(v)
        else:
            d[k] = v
    return from_dict(d)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    dc = tiny_cfg.data
    return generate_dataset(dc.seed, dc.n_train, dc.n_val, dc.n_test)


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_cfg, tiny_corpus):
    """A small captioner after stage-0 pretraining (shared, treat as read-only)."""
    from latentcap.trainer import pretrain_autoencoder

    m = Captioner(tiny_cfg)
    ids = np.stack([tokenize(r["caption"], m.vocab) for r in tiny_corpus if r["split"] == "train"])
    pretrain_autoencoder(m, ids, log_every=0)
    return m


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_pretrained, tmp_path_factory):
    from latentcap.trainer import save_checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "ae.ckpt"
    save_checkpoint(path, tiny_pretrained, stage="autoencoder")
    return path


@pytest.fixture
def fresh_pretrained(tiny_ckpt):
    """A private copy of the pretrained tiny model, safe to train."""
    from latentcap.trainer import load_checkpoint

    return load_checkpoint(tiny_ckpt)[0]


@pytest.fixture(scope="session")
def tiny_train_arrays(tiny_pretrained, tiny_corpus):
    from latentcap.scenegen import Scene, scene_index

    tr = [r for r in tiny_corpus if r["split"] == "train"]
    ids = np.stack([tokenize(r["caption"], tiny_pretrained.vocab) for r in tr])
    return ids, scene_index([Scene.from_dict(r["scene"]) for r in tr])


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
