"""Analytic FLOP accounting for the two-stream encoder.

Costs are per example.  A matmul of (m x k) by (k x n) costs 2mkn.
Elementwise work uses the per-element constants of :class:`FlopModel`;
those constants are conventions, not measurements, and only matter for
the small non-matmul share of the total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .adaptive_span import init_span_offsets
from .attention import param_rng, uses_entmax, uses_span
from .layerdrop import PRUNED, DropSchedule, prune_every_other
from .normalizers import BISECT_ITERS


@dataclass(frozen=True)
class FlopModel:
    softmax_per_elem: int = 5          # max, sub, exp, sum, div
    entmax_per_elem: int = 3 * BISECT_ITERS  # worst-case bisection: sub, clip/pow, sum
    span_mask_per_elem: int = 4        # ramp, clip, multiply, renormalize
    layernorm_per_elem: int = 5
    gelu_per_elem: int = 8
    add_per_elem: int = 1


def matmul_flops(m: int, k: int, n: int) -> int:
    return 2 * m * k * n


@dataclass
class LayerCost:
    matmul: int = 0
    other: int = 0

    @property
    def total(self) -> int:
        return self.matmul + self.other

    def __iadd__(self, o: "LayerCost"):
        self.matmul += o.matmul
        self.other += o.other
        return self


def attention_cost(fm: FlopModel, d: int, heads: int, tq: int, tk: int, mechanism: str,
                   max_span: int = 16, spans=None) -> LayerCost:
    """One attention sublayer incl. residual and layer norm.

    ``spans`` (per head) truncates the key width to min(tk, ceil(span)).
    """
    dh = d // heads
    c = LayerCost()
    c.matmul += 2 * matmul_flops(tq, d, d) + 2 * matmul_flops(tk, d, d)   # Q, O and K, V
    c.other += 2 * tq * d + 2 * tk * d                                     # biases
    for h in range(heads):
        w = tk if spans is None else min(tk, math.ceil(spans[h]))
        c.matmul += matmul_flops(tq, dh, w) + matmul_flops(tq, w, dh)
        if uses_span(mechanism):
            c.matmul += matmul_flops(tq, dh, max_span + 1)
            c.other += tq * w * (2 + fm.span_mask_per_elem)        # gather + add, mask
        per = fm.entmax_per_elem if uses_entmax(mechanism) else fm.softmax_per_elem
        c.other += tq * w * (per + 1)                                # +1 for the 1/sqrt(dh) scale
    c.other += tq * d * (fm.add_per_elem + fm.layernorm_per_elem)
    return c


def ffn_cost(fm: FlopModel, d: int, t: int, expansion: int = 4) -> LayerCost:
    c = LayerCost()
    c.matmul += matmul_flops(t, d, expansion * d) + matmul_flops(t, expansion * d, d)
    c.other += t * expansion * d * (fm.gelu_per_elem + 1) + t * d
    c.other += t * d * (fm.add_per_elem + fm.layernorm_per_elem)
    return c


def _module_spans(source, name: str, cfg, span_aware: bool):
    if not span_aware or not uses_span(cfg.mechanism):
        return None
    if source is not None:
        spans = source.head_spans()
        return [spans[f"{name}.{h}"] for h in range(cfg.heads)]
    z = init_span_offsets(param_rng(cfg.seed, f"{name}.z"), cfg.heads, cfg.max_span)
    return list(z + cfg.ramp)


def count_flops(model_or_config, seq_lens: tuple[int, int] | None = None,
                flop_model: FlopModel | None = None, span_aware: bool = False,
                pruned: bool = False, kept: dict[str, list[int]] | None = None) -> dict:
    """Per-stream and total FLOPs for one example; never runs the model.

    ``seq_lens`` = (text length, vision slots), defaulting to the config
    maxima.  ``pruned`` applies Every Other pruning with the config's
    per-stream drop counts; ``kept`` names executed layers explicitly.
    Span-aware counts read current spans from a model, or the deterministic
    initial spans when given only a config.
    """
    fm = flop_model or FlopModel()
    if hasattr(model_or_config, "config"):
        model, cfg = model_or_config, model_or_config.config
    else:
        model, cfg = None, model_or_config
    tl, tv = seq_lens or (cfg.max_text_len, cfg.max_slots)
    d, H = cfg.d, cfg.heads
    if pruned and kept is None:
        sched = DropSchedule(cfg.stream_layers,
                             {s: cfg.stream_drops[s] for s in cfg.stream_layers}, PRUNED, cfg.seed)
        kept = prune_every_other(sched)
    kept = kept or {}

    def att(name, tq, tk):
        return attention_cost(fm, d, H, tq, tk, cfg.mechanism, cfg.max_span,
                              _module_spans(model, name, cfg, span_aware))

    per_layer: dict[str, list[int]] = {}
    streams: dict[str, int] = {}
    matmul = 0

    embed = LayerCost(other=tl * d * (fm.add_per_elem + fm.layernorm_per_elem))
    head = LayerCost()
    if cfg.arch == "two-stream":
        embed.matmul += matmul_flops(tv, cfg.vision_dim, d)
        embed.other += tv * d * (2 * fm.add_per_elem + fm.layernorm_per_elem)
        head.matmul += matmul_flops(1, 2 * d, cfg.num_classes)
        head.other += tv * d + cfg.num_classes
    else:
        head.matmul += matmul_flops(1, d, cfg.num_classes)
        head.other += cfg.num_classes
    streams["embed"], streams["head"] = embed.total, head.total
    matmul += embed.matmul + head.matmul

    plan = [("lang", cfg.L, lambda i: [att(f"lang.{i}", tl, tl), ffn_cost(fm, d, tl)])]
    if cfg.arch == "two-stream":
        plan.append(("vis", cfg.V, lambda i: [att(f"vis.{i}", tv, tv), ffn_cost(fm, d, tv)]))
        plan.append(("cross", cfg.X, lambda i: [
            att(f"cross.{i}", tl, tv), att(f"cross.{i}", tv, tl),
            att(f"xlang.{i}", tl, tl), att(f"xvis.{i}", tv, tv),
            ffn_cost(fm, d, tl), ffn_cost(fm, d, tv)]))
    for stream, n, parts in plan:
        executed = kept.get(stream, range(n))
        costs = []
        for i in range(n):
            c = LayerCost()
            for part in parts(i):
                c += part
            costs.append(c)
        per_layer[stream] = [c.total for c in costs]
        streams[stream] = sum(costs[i].total for i in executed)
        matmul += sum(costs[i].matmul for i in executed)

    return {"streams": streams, "per_layer": per_layer,
            "total": sum(streams.values()), "matmul": matmul}


def attention_flops(report: dict) -> int:
    """Convenience: FLOPs of the executed attention stacks only."""
    return sum(v for k, v in report["streams"].items() if k in ("lang", "vis", "cross"))


PAPER_SHAPE = dict(d=768, heads=12, vision_dim=2048, num_classes=3129,
                   max_text_len=20, max_slots=36, vocab_size=30522)
