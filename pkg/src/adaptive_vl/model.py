"""Desk-scale two-stream (language / vision / cross-modality) encoder."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import (MECHANISMS, AttentionLayer, FeedForward, LayerNorm, Module,
                        MultiHeadAttention, normal_param)
from .layerdrop import ConfigError


@dataclass
class EncoderConfig:
    d: int = 32
    heads: int = 2
    L: int = 2
    V: int = 1
    X: int = 1
    mechanism: str = "softmax"
    max_span: int = 16
    ramp: float = 4.0
    span_lambda: float = 1e-3
    p_lang: int = 0
    p_vis: int = 0
    p_cross: int = 0
    layerdrop: str = "off"          # off | train | train+prune
    vocab_size: int = 17
    vision_dim: int = 24
    num_classes: int = 8
    max_text_len: int = 8
    max_slots: int = 6
    arch: str = "two-stream"        # two-stream | language
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mechanism not in MECHANISMS:
            raise ConfigError(f"mechanism must be one of {MECHANISMS}")
        if self.arch not in ("two-stream", "language"):
            raise ConfigError("arch must be 'two-stream' or 'language'")
        if min(self.L, self.V, self.X) < 1:
            raise ConfigError("L, V and X must all be >= 1")
        if self.d % self.heads:
            raise ConfigError("d must be divisible by heads")
        if self.layerdrop not in ("off", "train", "train+prune"):
            raise ConfigError("layerdrop must be off, train or train+prune")
        if self.ramp < 1:
            raise ConfigError("ramp width R must be >= 1")
        for p, n in self.drop_counts_and_depths():
            if not 0 <= p < n:
                raise ConfigError(f"need 0 <= p < N per stream, got p={p}, N={n}")

    def drop_counts_and_depths(self):
        if self.arch == "language":
            return [(self.p_lang, self.L)]
        return [(self.p_lang, self.L), (self.p_vis, self.V), (self.p_cross, self.X)]

    @property
    def stream_layers(self) -> dict[str, int]:
        if self.arch == "language":
            return {"lang": self.L}
        return {"lang": self.L, "vis": self.V, "cross": self.X}

    @property
    def stream_drops(self) -> dict[str, int]:
        return {"lang": self.p_lang, "vis": self.p_vis, "cross": self.p_cross}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**raw)


class CrossBlock(Module):
    """One cross-modality layer: a cross-attention shared by both directions,
    a self-attention per stream, then a feed-forward per stream."""

    def __init__(self, cfg: EncoderConfig, i: int):
        mk = dict(max_span=cfg.max_span, ramp=cfg.ramp, std=cfg.init_std)
        d, h, s, m = cfg.d, cfg.heads, cfg.seed, cfg.mechanism
        self.cross = MultiHeadAttention(d, h, m, s, f"cross.{i}", **mk)
        self.lang_self = MultiHeadAttention(d, h, m, s, f"xlang.{i}", **mk)
        self.vis_self = MultiHeadAttention(d, h, m, s, f"xvis.{i}", **mk)
        self.lang_ffn = FeedForward(d, s, f"xlang.{i}.ffn", std=cfg.init_std)
        self.vis_ffn = FeedForward(d, s, f"xvis.{i}.ffn", std=cfg.init_std)

    def __call__(self, lang, vis):
        lang_x = self.cross(lang, vis)
        vis_x = self.cross(vis, lang)
        lang_x = self.lang_ffn(self.lang_self(lang_x))
        vis_x = self.vis_ffn(self.vis_self(vis_x))
        return lang_x, vis_x

    def attention_sublayers(self):
        return [self.cross, self.lang_self, self.vis_self]


class _Base(Module):
    config: EncoderConfig

    def attention_modules(self) -> list[MultiHeadAttention]:
        mods = []
        for val in vars(self).values():
            if isinstance(val, list):
                for layer in val:
                    if isinstance(layer, AttentionLayer):
                        mods.append(layer.attn)
                    elif isinstance(layer, CrossBlock):
                        mods.extend(layer.attention_sublayers())
        return mods

    def span_params(self):
        return [m.span for m in self.attention_modules() if m.span is not None]

    def head_spans(self) -> dict[str, float]:
        """``stream.layer.head -> z + R`` for every span head."""
        out = {}
        for m in self.attention_modules():
            if m.span is not None:
                for h, v in enumerate(m.span.z.data + m.span.ramp):
                    out[f"{m.name}.{h}"] = float(v)
        return out

    def head_alphas(self) -> dict[str, float]:
        out = {}
        for m in self.attention_modules():
            a = m.alpha
            if a is not None:
                for h, v in enumerate(a):
                    out[f"{m.name}.{h}"] = float(v)
        return out

    def clamp_spans(self) -> None:
        for sp in self.span_params():
            sp.clamp_()

    def fallback_rows(self) -> int:
        return sum(m.fallback.rows for m in self.attention_modules())

    def _embed_text(self, tokens: np.ndarray):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[1] < 1:
            raise ValueError("empty text sequence")
        if tokens.shape[1] > self.config.max_text_len:
            raise ValueError(f"text longer than max_text_len={self.config.max_text_len}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError("token id outside vocabulary")
        x = nx.embedding(self.tok_emb, tokens) + nx.embedding(
            self.lang_pos, np.arange(tokens.shape[1]))
        return self.lang_emb_norm(x)


def _run_stack(layers, x, kept):
    for i, layer in enumerate(layers):
        if kept is None or i in kept:
            x = layer(x)
    return x


class TwoStreamEncoder(_Base):
    def __init__(self, cfg: EncoderConfig):
        self.config = cfg
        d, s = cfg.d, cfg.seed
        mk = dict(max_span=cfg.max_span, ramp=cfg.ramp, std=cfg.init_std)
        std = cfg.init_std
        self.tok_emb = normal_param(s, "tok_emb", (cfg.vocab_size, d), std)
        self.lang_pos = normal_param(s, "lang_pos", (cfg.max_text_len, d), std)
        self.lang_emb_norm = LayerNorm(d)
        self.vis_proj = normal_param(s, "vis_proj", (cfg.vision_dim, d), std)
        self.vis_proj_b = nx.parameter(np.zeros(d))
        self.vis_pos = normal_param(s, "vis_pos", (cfg.max_slots, d), std)
        self.vis_emb_norm = LayerNorm(d)
        self.lang_layers = [AttentionLayer(d, cfg.heads, cfg.mechanism, s, f"lang.{i}", **mk)
                            for i in range(cfg.L)]
        self.vis_layers = [AttentionLayer(d, cfg.heads, cfg.mechanism, s, f"vis.{i}", **mk)
                           for i in range(cfg.V)]
        self.cross_blocks = [CrossBlock(cfg, i) for i in range(cfg.X)]
        self.cls_w = normal_param(s, "cls_w", (2 * d, cfg.num_classes), std)
        self.cls_b = nx.parameter(np.zeros(cfg.num_classes))

    def _embed_vision(self, vision):
        v = np.asarray(vision, dtype=np.float64)
        if v.ndim == 2:
            v = v[None]
        if v.shape[1] < 1:
            raise ValueError("empty vision sequence")
        if v.shape[1] > self.config.max_slots or v.shape[2] != self.config.vision_dim:
            raise ValueError(f"vision features of shape {v.shape[1:]} do not fit the config")
        x = nx.linear(nx.Tensor(v), self.vis_proj, self.vis_proj_b)
        x = x + nx.embedding(self.vis_pos, np.arange(v.shape[1]))
        return self.vis_emb_norm(x)

    def pooled(self, tokens, vision, kept: dict[str, list[int]] | None = None):
        kept = kept or {}
        lang = self._embed_text(tokens)
        vis = self._embed_vision(vision)
        if lang.shape[0] != vis.shape[0]:
            raise ValueError("text and vision batch sizes differ")
        lang = _run_stack(self.lang_layers, lang, kept.get("lang"))
        vis = _run_stack(self.vis_layers, vis, kept.get("vis"))
        cross_kept = kept.get("cross")
        for i, block in enumerate(self.cross_blocks):
            if cross_kept is None or i in cross_kept:
                lang, vis = block(lang, vis)
        return lang[:, 0, :], vis.mean(axis=1)

    def __call__(self, tokens, vision, kept=None) -> nx.Tensor:
        """Class logits of shape (B, C), or (C,) for a single unbatched example."""
        single = np.asarray(tokens).ndim == 1
        lang_pooled, vis_pooled = self.pooled(tokens, vision, kept)
        logits = nx.linear(nx.concat([lang_pooled, vis_pooled], axis=-1), self.cls_w, self.cls_b)
        return logits.reshape(logits.shape[1:]) if single else logits


class LanguageClassifier(_Base):
    """Language stream only, first-token pooling; used for the copy task."""

    def __init__(self, cfg: EncoderConfig):
        self.config = cfg
        d, s = cfg.d, cfg.seed
        mk = dict(max_span=cfg.max_span, ramp=cfg.ramp, std=cfg.init_std)
        std = cfg.init_std
        self.tok_emb = normal_param(s, "tok_emb", (cfg.vocab_size, d), std)
        self.lang_pos = normal_param(s, "lang_pos", (cfg.max_text_len, d), std)
        self.lang_emb_norm = LayerNorm(d)
        self.lang_layers = [AttentionLayer(d, cfg.heads, cfg.mechanism, s, f"lang.{i}", **mk)
                            for i in range(cfg.L)]
        self.cls_w = normal_param(s, "cls_w", (d, cfg.num_classes), std)
        self.cls_b = nx.parameter(np.zeros(cfg.num_classes))

    def __call__(self, tokens, vision=None, kept=None) -> nx.Tensor:
        single = np.asarray(tokens).ndim == 1
        kept = kept or {}
        x = _run_stack(self.lang_layers, self._embed_text(tokens), kept.get("lang"))
        logits = nx.linear(x[:, 0, :], self.cls_w, self.cls_b)
        return logits.reshape(logits.shape[1:]) if single else logits


def build_model(cfg: EncoderConfig):
    return LanguageClassifier(cfg) if cfg.arch == "language" else TwoStreamEncoder(cfg)


# -- census -------------------------------------------------------------------

def _group(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("wq", "wk", "wv", "wo"):
        return "attention_projection"
    if leaf in ("bq", "bk", "bv", "bo"):
        return "attention_bias"
    if leaf == "z":
        return "span_offset"
    if leaf == "relpos_table":
        return "relative_position"
    if leaf == "raw_alpha":
        return "entmax_alpha"
    if leaf in ("gamma", "beta"):
        return "layer_norm"
    if leaf in ("w1", "b1", "w2", "b2"):
        return "feed_forward"
    if leaf in ("cls_w", "cls_b"):
        return "classifier"
    return "embedding"


def parameter_census(model) -> dict[str, int]:
    """Exact parameter counts per group, plus ``total``."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        g = _group(name)
        counts[g] = counts.get(g, 0) + int(p.data.size)
    counts = dict(sorted(counts.items()))
    counts["total"] = sum(counts.values())
    return counts


# -- checkpoints ----------------------------------------------------------------

class CheckpointError(IOError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def flat_parameters(model) -> np.ndarray:
    params = model.parameters()
    if not params:
        return np.zeros(0)
    return np.concatenate([p.data.reshape(-1) for p in params])


def load_flat_parameters(model, flat: np.ndarray) -> None:
    offset = 0
    for p in model.parameters():
        n = p.data.size
        p.data[...] = flat[offset:offset + n].reshape(p.data.shape)
        offset += n
    if offset != flat.size:
        raise CheckpointError(f"parameter buffer has {flat.size} values, model needs {offset}")


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    """Header (length-prefixed canonical JSON) + float64 buffer + CRC32."""
    header = {"encoder": model.config.to_dict()}
    if extra:
        header.update(extra)
    head = canonical_json(header).encode()
    buf = flat_parameters(model).astype("<f8").tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(buf)
        f.write(struct.pack("<I", zlib.crc32(buf) & 0xFFFFFFFF))


def read_checkpoint(path):
    """Return (header dict, flat parameter array); verifies the checksum."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise CheckpointError("checkpoint truncated")
    (n,) = struct.unpack_from("<Q", raw, 0)
    head = raw[8:8 + n]
    buf = raw[8 + n:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(buf) & 0xFFFFFFFF != crc or len(buf) % 8:
        raise CheckpointError("checkpoint checksum mismatch (corrupt file)")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
    return header, np.frombuffer(buf, dtype="<f8").astype(np.float64)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, header)."""
    header, flat = read_checkpoint(path)
    model = build_model(EncoderConfig.from_dict(header["encoder"]))
    load_flat_parameters(model, flat)
    return model, header
