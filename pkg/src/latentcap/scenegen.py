"""Synthetic scenes, their template captions, and the trainable condition encoder."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "large")
RELATIONS = ("above", "below", "left-of", "right-of", "none")
RELATION_WORDS = {
    "above": ("above",),
    "below": ("below",),
    "left-of": ("to", "the", "left", "of"),
    "right-of": ("to", "the", "right", "of"),
}
MAX_OBJECTS = 3
NUM_SLOTS = 8
RELATION_SLOT = MAX_OBJECTS


def caption_words():
    words = ["a", *SIZES, *COLORS, *SHAPES, "and"]
    for rel in RELATION_WORDS.values():
        words += [w for w in rel if w not in words]
    return words


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str

    def words(self):
        return ("a", self.size, self.color, self.shape)


@dataclass(frozen=True)
class Scene:
    objects: tuple
    relation: str = "none"

    def validate(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError(f"scene must have 1..{MAX_OBJECTS} objects")
        if (self.relation == "none") != (len(self.objects) == 1):
            raise ValueError("relation must be 'none' exactly when the scene has one object")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES:
                raise ValueError(f"bad object {o}")
        return self

    def key(self) -> str:
        objs = ";".join(f"{o.size},{o.color},{o.shape}" for o in self.objects)
        return f"{objs}|{self.relation}"

    def to_dict(self):
        return {"objects": [{"shape": o.shape, "color": o.color, "size": o.size} for o in self.objects],
                "relation": self.relation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(SceneObject(o["shape"], o["color"], o["size"]) for o in d["objects"]),
                   d["relation"])


def render_caption(scene: Scene) -> str:
    objs = scene.objects
    words = list(objs[0].words())
    if len(objs) >= 2:
        words += RELATION_WORDS[scene.relation]
        words += objs[1].words()
    if len(objs) == 3:
        words += ["and", *objs[2].words()]
    return " ".join(words)


def parse_caption(caption: str) -> Scene:
    """Inverse of :func:`render_caption`."""
    w = caption.split()

    def obj(i):
        if w[i] != "a" or len(w) < i + 4:
            raise ValueError(f"cannot parse object at word {i}: {caption!r}")
        return SceneObject(shape=w[i + 3], color=w[i + 2], size=w[i + 1])

    objs = [obj(0)]
    i = 4
    relation = "none"
    if i < len(w):
        for rel, rw in RELATION_WORDS.items():
            if tuple(w[i:i + len(rw)]) == rw:
                relation = rel
                i += len(rw)
                break
        else:
            raise ValueError(f"no relation at word {i}: {caption!r}")
        objs.append(obj(i))
        i += 4
    if i < len(w):
        if w[i] != "and":
            raise ValueError(f"expected 'and' at word {i}: {caption!r}")
        objs.append(obj(i + 1))
        i += 5
    if i != len(w):
        raise ValueError(f"trailing words in {caption!r}")
    return Scene(tuple(objs), relation).validate()


def sample_scene(rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, MAX_OBJECTS + 1))
    objs = tuple(SceneObject(SHAPES[rng.integers(4)], COLORS[rng.integers(4)], SIZES[rng.integers(2)])
                 for _ in range(n))
    relation = "none" if n == 1 else RELATIONS[rng.integers(4)]
    return Scene(objs, relation)


def generate_dataset(seed, n_train=8192, n_val=512, n_test=512, max_words=None, min_words=0):
    """Distinct scenes split into train/val/test; a pure function of the arguments.

    ``max_words``/``min_words`` restrict caption length (used for length buckets).
    Returns a list of ``{"scene", "caption", "split"}`` records.
    """
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    if min(sizes.values()) < 1:
        raise ValueError("split sizes must be >= 1")
    total = sum(sizes.values())
    rng = np.random.default_rng(seed)
    seen = set()
    scenes = []
    attempts = 0
    while len(scenes) < total:
        attempts += 1
        if attempts > 200 * total + 10_000:
            raise ValueError(f"only {len(scenes)} distinct scenes satisfy the length limits")
        sc = sample_scene(rng)
        k = sc.key()
        n_words = len(render_caption(sc).split())
        if k in seen or n_words < min_words or (max_words is not None and n_words > max_words):
            continue
        seen.add(k)
        scenes.append(sc)
    scenes = [scenes[j] for j in rng.permutation(len(scenes))]
    records = []
    i = 0
    for split, n in sizes.items():
        for sc in scenes[i:i + n]:
            records.append({"scene": sc.to_dict(), "caption": render_caption(sc), "split": split})
        i += n
    return records


def write_jsonl(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def scene_index(scenes) -> torch.Tensor:
    """(B, 10) int tensor: per object (shape, color, size) with -1 for absent, then relation."""
    rows = []
    for sc in scenes:
        row = []
        for k in range(MAX_OBJECTS):
            if k < len(sc.objects):
                o = sc.objects[k]
                row += [SHAPES.index(o.shape), COLORS.index(o.color), SIZES.index(o.size)]
            else:
                row += [-1, -1, -1]
        row.append(RELATIONS.index(sc.relation))
        rows.append(row)
    return torch.tensor(rows, dtype=torch.long)


class ConditionEncoder(nn.Module):
    """Maps scene symbols to M condition slots.

    Slot k < 3 holds object k (sum of its attribute embeddings), slot 3 the
    relation; remaining and absent-object slots hold a learned null-slot
    vector. A learned slot-position embedding is added everywhere.
    """

    def __init__(self, dim=256, slots=NUM_SLOTS):
        super().__init__()
        assert slots >= MAX_OBJECTS + 1
        self.dim, self.slots = dim, slots
        self.shape = nn.Embedding(len(SHAPES), dim)
        self.color = nn.Embedding(len(COLORS), dim)
        self.size = nn.Embedding(len(SIZES), dim)
        self.relation = nn.Embedding(len(RELATIONS), dim)
        self.slot_pos = nn.Parameter(torch.randn(slots, dim) * 0.02)
        self.null_slot = nn.Parameter(torch.randn(dim) * 0.02)
        self.null_cond = nn.Parameter(torch.randn(dim))

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        B = idx.shape[0]
        out = self.null_slot.expand(B, self.slots, self.dim).clone()
        for k in range(MAX_OBJECTS):
            s, c, z = idx[:, 3 * k], idx[:, 3 * k + 1], idx[:, 3 * k + 2]
            present = s >= 0
            emb = self.shape(s.clamp(min=0)) + self.color(c.clamp(min=0)) + self.size(z.clamp(min=0))
            out[:, k] = torch.where(present[:, None], emb, out[:, k])
        out[:, RELATION_SLOT] = self.relation(idx[:, -1])
        return out + self.slot_pos

    def encode_condition(self, scenes):
        return self(scene_index(scenes))

    def null_condition(self, batch=None):
        v = self.null_cond.expand(self.slots, self.dim)
        return v if batch is None else v.expand(batch, self.slots, self.dim)
