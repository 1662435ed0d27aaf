"""LayerDrop: stochastic whole-layer dropping in training and Every Other
pruning at inference.

``p`` is an integer count of layers dropped per stream.  During training
each layer is kept independently with probability 1 - p/N; at inference
exactly N - p evenly spaced layers remain.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

OFF = "off"
TRAINING = "training-stochastic"
PRUNED = "inference-pruned"
MODES = (OFF, TRAINING, PRUNED)


class ConfigError(ValueError):
    pass


def counter_uniform(*key) -> float:
    """Uniform [0, 1) draw that is a pure function of ``key``.

    Keys are stringified and hashed, so draws are random-access and need
    no generator state.
    """
    msg = "\x1f".join(str(k) for k in key).encode()
    (bits,) = struct.unpack("<Q", hashlib.blake2b(msg, digest_size=8).digest())
    return (bits >> 11) * (1.0 / (1 << 53))


@dataclass
class DropSchedule:
    layers: dict[str, int]
    drops: dict[str, int] = field(default_factory=dict)
    mode: str = OFF
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown layerdrop mode {self.mode!r}")
        for stream, n in self.layers.items():
            p = self.drops.get(stream, 0)
            if not 0 <= p < n:
                raise ConfigError(f"stream {stream!r}: need 0 <= p < N, got p={p}, N={n}")

    def keep_probability(self, stream: str) -> float:
        return 1.0 - self.drops.get(stream, 0) / self.layers[stream]


def training_mask(schedule: DropSchedule, step: int) -> dict[str, list[bool]]:
    """Per-layer keep flags for one training step (same for the whole batch)."""
    if schedule.mode != TRAINING:
        raise ConfigError("training_mask needs a training-stochastic schedule")
    out = {}
    for stream, n in schedule.layers.items():
        keep = schedule.keep_probability(stream)
        out[stream] = [counter_uniform(schedule.seed, step, stream, i) < keep for i in range(n)]
    return out


def every_other_drops(n_layers: int, p: int) -> list[int]:
    """Dropped indices round(k N / p) - 1, k = 1..p (half-up rounding)."""
    if not 0 <= p < n_layers:
        raise ConfigError(f"need 0 <= p < N, got p={p}, N={n_layers}")
    return sorted({int(math.floor(k * n_layers / p + 0.5)) - 1 for k in range(1, p + 1)})


def prune_every_other(schedule: DropSchedule) -> dict[str, list[int]]:
    """Kept layer indices per stream for inference."""
    if schedule.mode != PRUNED:
        raise ConfigError("prune_every_other needs an inference-pruned schedule")
    kept = {}
    for stream, n in schedule.layers.items():
        dropped = set(every_other_drops(n, schedule.drops.get(stream, 0)))
        kept[stream] = [i for i in range(n) if i not in dropped]
    return kept


def mask_to_indices(mask: dict[str, list[bool]]) -> dict[str, list[int]]:
    return {s: [i for i, k in enumerate(flags) if k] for s, flags in mask.items()}


def format_kept(kept: dict[str, list[int]] | None, layers: dict[str, int]) -> str:
    """Compact ``stream:i,j;stream:k`` listing of executed layers."""
    if kept is None:
        kept = {s: list(range(n)) for s, n in layers.items()}
    return ";".join(f"{s}:{','.join(str(i) for i in kept[s])}" for s in layers)


def expected_flops_ratio(config, seq_lens: tuple[int, int] | None = None, flop_model=None) -> float:
    """FLOPs of the Every-Other-pruned model over FLOPs of the full model."""
    from .flops import FlopModel, count_flops
    flop_model = flop_model or FlopModel()
    full = count_flops(config, seq_lens=seq_lens, flop_model=flop_model)["total"]
    pruned = count_flops(config, seq_lens=seq_lens, flop_model=flop_model, pruned=True)["total"]
    return pruned / full
