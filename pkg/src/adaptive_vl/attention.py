"""Multi-head self/cross attention with a pluggable weight normalizer."""

from __future__ import annotations

import zlib

import numpy as np

from . import numerics as nx
from .adaptive_span import (MaskFallback, RelPosTable, SpanParams, init_span_offsets,
                            masked_renormalize, relative_distances, similarity_scores,
                            span_mask, span_masked_attention)
from .normalizers import alpha_from_raw, entmax

MECHANISMS = ("softmax", "entmax", "span", "span+entmax")


def uses_span(mechanism: str) -> bool:
    return mechanism in ("span", "span+entmax")


def uses_entmax(mechanism: str) -> bool:
    return mechanism in ("entmax", "span+entmax")


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Initializer stream keyed by (seed, parameter name).

    Keying by name keeps shared weights identical across mechanisms even
    though span/entmax models register extra parameters.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    """Parameter container; registration order is attribute assignment order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, nx.Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[nx.Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def normal_param(seed: int, name: str, shape, std: float = 0.02) -> nx.Tensor:
    return nx.parameter(param_rng(seed, name).normal(0.0, std, size=shape))


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = nx.parameter(np.ones(d))
        self.beta = nx.parameter(np.zeros(d))

    def __call__(self, x):
        return nx.layer_norm(x, self.gamma, self.beta)


class MultiHeadAttention(Module):
    """Attention sublayer: projections, normalizer, output projection,
    residual and post layer norm.

    ``name`` seeds the initializers and labels the heads in exported
    metrics (e.g. ``lang.0``).
    """

    def __init__(self, d: int, heads: int, mechanism: str, seed: int, name: str,
                 max_span: int = 16, ramp: float = 4.0, std: float = 0.02):
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        if mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {mechanism!r}")
        self.d, self.heads, self.mechanism, self.name = d, heads, mechanism, name
        for w in ("wq", "wk", "wv", "wo"):
            setattr(self, w, normal_param(seed, f"{name}.{w}", (d, d), std))
            setattr(self, "b" + w[1], nx.parameter(np.zeros(d)))
        self.norm = LayerNorm(d)
        self.span: SpanParams | None = None
        self.relpos: RelPosTable | None = None
        if uses_span(mechanism):
            z = init_span_offsets(param_rng(seed, f"{name}.z"), heads, max_span)
            self.z = nx.parameter(z)
            self.relpos_table = normal_param(seed, f"{name}.relpos", (max_span + 1, d), std)
            self.span = SpanParams(self.z, ramp=ramp, max_span=max_span)
            self.relpos = RelPosTable(self.relpos_table, max_span)
        if uses_entmax(mechanism):
            self.raw_alpha = nx.parameter(np.zeros(heads))
        self.fallback = MaskFallback()
        self.last_weights: np.ndarray | None = None

    @property
    def alpha(self) -> np.ndarray | None:
        raw = getattr(self, "raw_alpha", None)
        return None if raw is None else alpha_from_raw(raw.data)

    def _split(self, x: nx.Tensor) -> nx.Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def weights(self, scores: nx.Tensor, distances: np.ndarray) -> nx.Tensor:
        mech = self.mechanism
        if mech == "softmax":
            return nx.softmax_rows(scores)
        if mech == "entmax":
            return entmax(scores, raw_alpha=self.raw_alpha)
        mask = span_mask(self.span, distances)
        if mech == "span":
            return span_masked_attention(scores, mask, distances, self.fallback)
        return masked_renormalize(entmax(scores, raw_alpha=self.raw_alpha), mask, distances,
                                  self.fallback)

    def __call__(self, xq: nx.Tensor, xkv: nx.Tensor | None = None) -> nx.Tensor:
        xkv = xq if xkv is None else xkv
        b, tq, _ = xq.shape
        tk = xkv.shape[1]
        distances = relative_distances(tq, tk)
        q = self._split(nx.linear(xq, self.wq, self.bq))
        k = self._split(nx.linear(xkv, self.wk, self.bk))
        v = self._split(nx.linear(xkv, self.wv, self.bv))
        scores = similarity_scores(q, k, self.relpos, distances)
        w = self.weights(scores, distances)
        self.last_weights = w.data
        ctx = nx.matmul(w, v).transpose(0, 2, 1, 3).reshape(b, tq, self.d)
        return self.norm(xq + nx.linear(ctx, self.wo, self.bo))


class FeedForward(Module):
    def __init__(self, d: int, seed: int, name: str, expansion: int = 4, std: float = 0.02):
        self.w1 = normal_param(seed, f"{name}.w1", (d, expansion * d), std)
        self.b1 = nx.parameter(np.zeros(expansion * d))
        self.w2 = normal_param(seed, f"{name}.w2", (expansion * d, d), std)
        self.b2 = nx.parameter(np.zeros(d))
        self.norm = LayerNorm(d)

    def __call__(self, x):
        h = nx.gelu(nx.linear(x, self.w1, self.b1))
        return self.norm(x + nx.linear(h, self.w2, self.b2))


class AttentionLayer(Module):
    """Attention sublayer followed by a feed-forward sublayer."""

    def __init__(self, d: int, heads: int, mechanism: str, seed: int, name: str,
                 max_span: int = 16, ramp: float = 4.0, std: float = 0.02):
        self.attn = MultiHeadAttention(d, heads, mechanism, seed, name, max_span, ramp, std)
        self.ffn = FeedForward(d, seed, f"{name}.ffn", std=std)

    def __call__(self, x, kv=None):
        return self.ffn(self.attn(x, kv))


def _batched(x: nx.Tensor):
    x = nx.as_tensor(x)
    return (x, False) if x.ndim == 3 else (x.reshape(1, *x.shape), True)


def self_attend(layer: AttentionLayer, x) -> nx.Tensor:
    """x: (T, d) or (B, T, d)."""
    xb, single = _batched(x)
    if xb.shape[1] < 1:
        raise ValueError("self_attend needs at least one token")
    out = layer(xb)
    return out.reshape(out.shape[1:]) if single else out


def cross_attend(layer: AttentionLayer, queries_from, keys_values_from) -> nx.Tensor:
    """Queries from one stream, keys and values from the other."""
    qa, single = _batched(queries_from)
    kb, _ = _batched(keys_values_from)
    if qa.shape[1] < 1 or kb.shape[1] < 1:
        raise ValueError("cross_attend needs nonempty sequences")
    out = layer(qa, kb)
    return out.reshape(out.shape[1:]) if single else out
