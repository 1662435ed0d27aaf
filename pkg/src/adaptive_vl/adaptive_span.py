"""Learnable attention spans: soft distance mask, masked renormalization,
relative-position scores and the span penalty."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, concat, gather_last, matmul, swap_last


@dataclass
class SpanParams:
    """Per-head span offsets ``z`` (a learnable tensor of shape (H,))."""

    z: Tensor
    ramp: float = 4.0
    max_span: int = 16

    def __post_init__(self):
        if self.ramp < 1:
            raise ValueError("ramp width R must be >= 1")

    @property
    def heads(self) -> int:
        return int(self.z.data.size)

    def clamp_(self) -> None:
        np.clip(self.z.data, 0.0, self.max_span, out=self.z.data)


def init_span_offsets(rng: np.random.Generator, heads: int, max_span: int,
                      gain: float = math.sqrt(2.0)) -> np.ndarray:
    """Kaiming-normal draw with fan_in = max_span, folded to be non-negative.

    Folding (rather than clamping negatives to 0) keeps every head off the
    z = 0 corner, where a target just past the ramp gets no gradient.
    """
    std = gain / math.sqrt(max_span)
    return np.clip(np.abs(rng.normal(0.0, std, size=heads)), 0.0, max_span)


def mask_value(x, z, ramp: float):
    """m_z(x) = min(max((R + z - x) / R, 0), 1)."""
    return np.clip((ramp + np.asarray(z, dtype=np.float64) - np.asarray(x, dtype=np.float64))
                   / ramp, 0.0, 1.0)


def current_span(params: SpanParams) -> np.ndarray:
    """Smallest distance at which each head's mask is exactly zero (z + R)."""
    return params.z.data + params.ramp


def relative_distances(n_query: int, n_key: int) -> np.ndarray:
    """|t - r| over sequence index order, shape (n_query, n_key)."""
    return np.abs(np.arange(n_query)[:, None] - np.arange(n_key)[None, :]).astype(np.float64)


def span_mask(params: SpanParams, distances: np.ndarray) -> Tensor:
    """Soft mask of shape (H, Tq, Tk), differentiable in z.

    Keys further than ``max_span`` are outside the window entirely.  At the
    two kinks of the ramp the subgradient is taken to be 0.
    """
    z = params.z
    R = params.ramp
    raw = (R + z.data[:, None, None] - distances[None]) / R
    window = (distances <= params.max_span)[None]
    m = np.clip(raw, 0.0, 1.0) * window
    ramp_zone = (raw > 0.0) & (raw < 1.0) & window

    def backward(g):
        z.accumulate((g * ramp_zone).sum(axis=tuple(range(g.ndim - 3)) + (-2, -1)) / R)

    return Tensor.make(m, (z,), backward, "span_mask")


class MaskFallback:
    """Counts rows whose masked support was empty."""

    def __init__(self):
        self.rows = 0


def _fallback_rows(masked_total: np.ndarray, distances: np.ndarray):
    empty = masked_total[..., 0] <= 0.0
    if not np.any(empty):
        return empty, None
    nearest = distances == distances.min(axis=-1, keepdims=True)
    fallback = nearest / nearest.sum(axis=-1, keepdims=True)
    return empty, fallback


def span_masked_attention(scores: Tensor, mask: Tensor, distances: np.ndarray,
                          fallback: MaskFallback | None = None) -> Tensor:
    """A_tr = m(t-r) exp(s_tr) / sum_q m(t-q) exp(s_tq), row-wise.

    ``scores`` is (..., H, Tq, Tk) and ``mask`` is (H, Tq, Tk).  Exponentials
    are shifted by the row max over the mask's support.  A row with an
    empty support puts uniform weight on its nearest key(s) and passes no
    gradient.
    """
    s = scores.data
    m = mask.data
    support = m > 0
    row_max = np.where(support, s, -np.inf).max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(support, np.exp(np.minimum(s - row_max, 0.0)), 0.0)
    u = m * e
    total = u.sum(axis=-1, keepdims=True)
    empty, fb = _fallback_rows(total, distances)
    a = u / np.where(total > 0, total, 1.0)
    if fb is not None:
        a = np.where(empty[..., None], np.broadcast_to(fb, a.shape), a)
        if fallback is not None:
            fallback.rows += int(empty.sum())
    live = ~empty[..., None]

    def backward(g):
        inner = (g - (g * a).sum(axis=-1, keepdims=True)) * live
        if scores.requires_grad:
            scores.accumulate(inner * a)
        if mask.requires_grad:
            du = inner / np.where(total > 0, total, 1.0)
            mask.accumulate(du * e)

    return Tensor.make(a, (scores, mask), backward, "span_attention")


def masked_renormalize(probs: Tensor, mask: Tensor, distances: np.ndarray,
                       fallback: MaskFallback | None = None) -> Tensor:
    """A = m * q / sum(m * q) for an already-normalized distribution q."""
    q = probs.data
    m = mask.data
    u = m * q
    total = u.sum(axis=-1, keepdims=True)
    empty, fb = _fallback_rows(total, distances)
    safe = np.where(total > 0, total, 1.0)
    a = u / safe
    if fb is not None:
        a = np.where(empty[..., None], np.broadcast_to(fb, a.shape), a)
        if fallback is not None:
            fallback.rows += int(empty.sum())
    live = ~empty[..., None]

    def backward(g):
        du = (g - (g * a).sum(axis=-1, keepdims=True)) * live / safe
        if probs.requires_grad:
            probs.accumulate(du * m)
        if mask.requires_grad:
            mask.accumulate(du * q)

    return Tensor.make(a, (probs, mask), backward, "masked_renorm")


class RelPosTable:
    """Learnable embeddings P_d for clipped distances d = 0..max_span."""

    def __init__(self, table: Tensor, max_span: int):
        if table.shape[0] != max_span + 1:
            raise ValueError("relative position table must have max_span + 1 rows")
        self.table = table
        self.max_span = max_span

    def lookup_index(self, distances: np.ndarray) -> np.ndarray:
        return np.minimum(distances, self.max_span).astype(np.int64)


def similarity_scores(q: Tensor, k: Tensor, pos: RelPosTable | None,
                      distances: np.ndarray | None = None) -> Tensor:
    """s_tr = q_t . (k_r + P_{|t-r|}) / sqrt(d_head).

    ``q`` is (..., H, Tq, dh) and ``k`` is (..., H, Tk, dh) (already
    projected).  The positional term is computed as q @ P^T over the table
    rows, then gathered per (t, r).
    """
    dh = q.shape[-1]
    if k.shape[-1] != dh:
        raise ValueError(f"similarity_scores: head dims differ ({q.shape} vs {k.shape})")
    scores = matmul(q, swap_last(k))
    if pos is not None:
        heads = q.shape[-3]
        table = pos.table.reshape(pos.max_span + 1, heads, dh).transpose(1, 2, 0)  # H, dh, S+1
        rel = matmul(q, table)
        scores = scores + gather_last(rel, pos.lookup_index(distances))
    return scores * (1.0 / math.sqrt(dh))


def span_penalty(all_params: list[SpanParams], lam: float) -> Tensor:
    """lam * mean over all heads of z."""
    if lam < 0:
        raise ValueError("span penalty coefficient must be >= 0")
    zs = concat([p.z for p in all_params], axis=0)
    return zs.mean() * lam
