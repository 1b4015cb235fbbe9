"""Run configuration: one TOML file merged over defaults, plus a stable digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import toml


@dataclass
class DataConfig:
    seed: int = 13
    n_train: int = 8192
    n_val: int = 512
    n_test: int = 512


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    steps: int = 1000
    s: float = 0.008
    noise_factor: float = 1.0


@dataclass
class TextConfig:
    dim: int = 256
    layers: int = 4
    split: int = 2
    heads: int = 4
    ffn: int = 1024
    max_len: int = 24


@dataclass
class DiffuserConfig:
    blocks: int = 6
    dim: int = 256
    heads: int = 4
    ffn: int = 1024


@dataclass
class PretrainConfig:
    epochs: int = 6
    batch_size: int = 64
    lr: float = 1e-3
    mask_prob: float = 0.5
    stats_samples: int = 2000


@dataclass
class TrainConfig:
    lam: float = 0.2
    cfg_drop_prob: float = 0.1
    self_cond_prob: float = 0.5
    peak_lr: float = 5e-5
    warmup_ratio: float = 0.1
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    batch_size: int = 64
    epochs: int = 15

    def validate(self):
        for name in ("cfg_drop_prob", "self_cond_prob", "warmup_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"train.{name} must lie in [0, 1], got {v}")
        if self.lam < 0:
            raise ValueError(f"train.lam must be >= 0, got {self.lam}")
        return self


@dataclass
class SamplerConfig:
    steps: int = 30
    eta: float = 0.0
    guidance: float = 1.0
    back_refine: bool = False
    t_frac: float = 0.5
    l_frac: float = 0.5
    mbr: int = 1
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if not (0.0 < self.t_frac < 1.0 and 0.0 < self.l_frac < 1.0):
            raise ValueError("back-refine fractions must lie in (0, 1)")
        if self.steps < 1 or self.mbr < 1:
            raise ValueError("steps and mbr must be >= 1")
        return self


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    text: TextConfig = field(default_factory=TextConfig)
    diffuser: DiffuserConfig = field(default_factory=DiffuserConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def model_dict(self):
        """Sections that determine checkpoint contents (sampling knobs excluded)."""
        d = self.to_dict()
        return {k: d[k] for k in ("seed", "data", "schedule", "text", "diffuser", "pretrain", "train")}

    def digest(self) -> bytes:
        blob = json.dumps(self.model_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def validate(self):
        self.train.validate()
        self.sampler.validate()
        if self.text.dim % self.text.heads or self.diffuser.dim % self.diffuser.heads:
            raise ValueError("model dims must be divisible by head counts")
        return self


def _merge(dc, values: dict, path=""):
    names = {f.name: f for f in dataclasses.fields(dc)}
    for key, val in values.items():
        if key not in names:
            raise ValueError(f"unknown config key {path}{key}")
        cur = getattr(dc, key)
        if dataclasses.is_dataclass(cur):
            if not isinstance(val, dict):
                raise ValueError(f"config section {path}{key} must be a table")
            _merge(cur, val, f"{path}{key}.")
        else:
            typ = type(cur)
            if typ is float and isinstance(val, int) and not isinstance(val, bool):
                val = float(val)
            if not isinstance(val, typ):
                raise ValueError(f"config key {path}{key} expects {typ.__name__}, got {val!r}")
            setattr(dc, key, val)


def from_dict(d: dict) -> RunConfig:
    cfg = RunConfig()
    _merge(cfg, d)
    return cfg.validate()


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    d = toml.load(path) if path else {}
    cfg = from_dict(d)
    if overrides:
        _merge(cfg, overrides)
    return cfg.validate()


def dump_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        toml.dump(cfg.to_dict(), f)
