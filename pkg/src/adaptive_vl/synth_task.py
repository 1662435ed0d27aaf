"""Seeded synthetic question-answering data over vision "slots".

Each example draws a scene of ``n_slots`` slots; every slot carries one
value per attribute type, encoded as noisy one-hot blocks.  The question
names an attribute type and a slot; the answer is that value.  Examples
are a pure function of (seed, index), so any index can be generated
without materialising the ones before it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from .layerdrop import ConfigError

PAD, ASK = 0, 1
ATTRIBUTE_NAMES = ("color", "shape", "size", "material", "texture", "pose")


@dataclass
class TaskSpec:
    question_len: int = 8
    n_slots: int = 6
    n_attributes: int = 3
    n_values: int = 8
    noise: float = 0.05

    def __post_init__(self):
        if self.n_slots < 1:
            raise ConfigError("n_slots must be >= 1")
        if self.question_len < 3:
            raise ConfigError("question_len must be >= 3 (ASK, attribute, slot)")
        if not 1 <= self.n_attributes <= len(ATTRIBUTE_NAMES):
            raise ConfigError(f"n_attributes must be in 1..{len(ATTRIBUTE_NAMES)}")
        if self.n_values < 2:
            raise ConfigError("n_values must be >= 2")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def vision_dim(self) -> int:
        return self.n_attributes * self.n_values

    @property
    def num_classes(self) -> int:
        return self.n_values

    def attribute_token(self, a: int) -> int:
        return 2 + a

    def slot_token(self, s: int) -> int:
        return 2 + self.n_attributes + s

    @property
    def vocab_size(self) -> int:
        return 2 + self.n_attributes + self.n_slots

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TaskSpec":
        known = {f.name for f in fields(cls)}
        bad = set(raw) - known
        if bad:
            raise ConfigError(f"unknown task keys: {sorted(bad)}")
        return cls(**raw)


@dataclass
class SynthExample:
    question: np.ndarray      # int64 (T_q,)
    vision: np.ndarray        # float64 (T_v, d_v)
    answer: int
    meta: dict

    def to_json(self) -> str:
        return json.dumps({"question": [int(t) for t in self.question],
                           "vision": [float(v) for v in self.vision.reshape(-1)],
                           "vision_shape": list(self.vision.shape),
                           "answer": int(self.answer)},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "SynthExample":
        raw = json.loads(line)
        shape = raw.get("vision_shape")
        vision = np.asarray(raw["vision"], dtype=np.float64)
        vision = vision.reshape(shape) if shape else vision.reshape(1, -1)
        return cls(np.asarray(raw["question"], dtype=np.int64), vision, int(raw["answer"]), {})


def example_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, index)."""
    return np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream],
                                                counter=[index, 0, 0, 0]))


def make_example(seed: int, index: int, spec: TaskSpec, *, slot: int | None = None,
                 attribute: int | None = None, values: np.ndarray | None = None) -> SynthExample:
    rng = example_rng(seed, index)
    vals = rng.integers(0, spec.n_values, size=(spec.n_slots, spec.n_attributes))
    s = int(rng.integers(0, spec.n_slots))
    a = int(rng.integers(0, spec.n_attributes))
    noise = rng.normal(0.0, 1.0, size=(spec.n_slots, spec.vision_dim))
    if values is not None:
        vals = np.asarray(values, dtype=np.int64).reshape(spec.n_slots, spec.n_attributes)
    s = s if slot is None else slot
    a = a if attribute is None else attribute
    vision = spec.noise * noise
    for i in range(spec.n_slots):
        for j in range(spec.n_attributes):
            vision[i, j * spec.n_values + vals[i, j]] += 1.0
    question = np.full(spec.question_len, PAD, dtype=np.int64)
    question[:3] = (ASK, spec.attribute_token(a), spec.slot_token(s))
    return SynthExample(question, vision, int(vals[s, a]),
                        {"slot": s, "attribute": ATTRIBUTE_NAMES[a], "distance": s})


def generate(seed: int, count: int, spec: TaskSpec | None = None, start: int = 0) -> Iterator[SynthExample]:
    spec = spec or TaskSpec()
    for i in range(start, start + count):
        yield make_example(seed, i, spec)


@dataclass
class CopySpec:
    """Language-only task: the answer is the token ``distance`` positions
    from the read-out position 0."""

    question_len: int = 8
    n_values: int = 8
    distance: int = 4

    def __post_init__(self):
        if not 0 <= self.distance < self.question_len:
            raise ConfigError(f"copy distance {self.distance} must be in [0, {self.question_len})")

    @property
    def vocab_size(self) -> int:
        return self.n_values

    @property
    def num_classes(self) -> int:
        return self.n_values

    def to_dict(self) -> dict:
        return asdict(self)


def copy_distance_variant(seed: int, count: int, distance: int, question_len: int = 8,
                          n_values: int = 8, start: int = 0) -> Iterator[SynthExample]:
    spec = CopySpec(question_len, n_values, distance)
    for i in range(start, start + count):
        rng = example_rng(seed, i, stream=1)
        q = rng.integers(0, spec.n_values, size=spec.question_len)
        yield SynthExample(q.astype(np.int64), np.zeros((1, 1)), int(q[spec.distance]),
                           {"distance": spec.distance})


def stack(examples: list[SynthExample]):
    """Batch arrays (questions, vision, answers)."""
    return (np.stack([e.question for e in examples]),
            np.stack([e.vision for e in examples]),
            np.array([e.answer for e in examples], dtype=np.int64))


def dump(examples, path) -> int:
    n = 0
    with open(path, "w") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")
            n += 1
    return n


def load(path) -> list[SynthExample]:
    with open(path) as f:
        return [SynthExample.from_json(line) for line in f if line.strip()]
