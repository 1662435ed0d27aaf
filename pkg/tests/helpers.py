"""Shared fixtures-by-function for model-level tests."""

import numpy as np

from adaptive_vl import numerics as nx
from adaptive_vl.model import EncoderConfig, build_model


def tiny_model(mechanism, seed=3, **overrides):
    """d = 8, two heads, 1-1-1 layers; spans placed on the ramp so z has gradient."""
    kw = dict(d=8, heads=2, L=1, V=1, X=1, mechanism=mechanism, max_span=4, ramp=2.0,
              init_std=0.5, seed=seed)
    kw.update(overrides)
    cfg = EncoderConfig(**kw)
    model = build_model(cfg)
    rng = np.random.default_rng(seed)
    for sp in model.span_params():
        sp.z.data[:] = rng.uniform(0.2, 2.5, size=sp.z.data.shape)
    return model


def random_batch(cfg, batch=3, text_len=6, slots=5, seed=0):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=(batch, text_len))
    vision = rng.normal(size=(batch, slots, cfg.vision_dim))
    answers = rng.integers(0, cfg.num_classes, size=batch)
    return tokens, vision, answers


GRAD_FLOOR = 1e-6


def end_to_end_gradient_errors(model, batch, n_random=20, seed=0, step=1e-5):
    """Relative errors |analytic - numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)
    for ``n_random`` sampled parameter entries plus every span offset and alpha.

    The floor matters only for entries whose exact gradient is zero (key
    biases shift whole score rows, which every normalizer ignores); there
    the finite difference is pure rounding noise of order 1e-11.
    """
    q, v, a = batch
    model.zero_grad()
    nx.cross_entropy(model(q, v), a).backward()
    entries = [(name, p, i) for name, p in model.named_parameters() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    picks = [entries[j] for j in rng.choice(len(entries), n_random, replace=False)]
    picks += [e for e in entries if e[0].endswith((".z", ".raw_alpha"))]

    def loss():
        with nx.no_grad():
            return nx.cross_entropy(model(q, v), a).item()

    errors = []
    for name, p, i in picks:
        numeric = nx.finite_difference(loss, p.data, [i], step).reshape(-1)[i]
        analytic = p.grad.reshape(-1)[i]
        scale = max(abs(analytic), abs(numeric), GRAD_FLOOR)
        errors.append((name, i, abs(analytic - numeric) / scale))
    return errors
