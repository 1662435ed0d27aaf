"""Multi-run drivers: the mechanism ablation and the copy-distance span probe."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import MECHANISMS
from .model import EncoderConfig, canonical_json
from .train import DataSource, TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("mechanism", "seed", "steps", "accuracy", "loss", "steps_to_90")


def run_ablation(cfg: TrainConfig, seeds, out=None, steps: int | None = None,
                 mechanisms=MECHANISMS) -> list[dict]:
    """Train every mechanism on the same seed set.

    Writes ``ablation.csv`` (one row per run) and ``ablation_summary.json``
    (mean and standard deviation of accuracy per mechanism) into ``out``.
    """
    rows = []
    for mech in mechanisms:
        for seed in seeds:
            run = copy.deepcopy(cfg)
            run.encoder.mechanism = mech
            run.seed = int(seed)
            if steps is not None:
                run.steps = int(steps)
                run.eval_interval = min(run.eval_interval, run.steps)
            run.__post_init__()
            res = train(run)
            rows.append({"mechanism": mech, "seed": int(seed), "steps": run.steps,
                         "accuracy": float(res.final["accuracy"]),
                         "loss": float(res.final["loss"]),
                         "steps_to_90": res.steps_to_90})
            log.info("ablation %s seed %d acc %s", mech, seed, res.final["accuracy"])
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: ("" if r[k] is None else r[k]) for k in ABLATION_COLUMNS})
        (out / "ablation_summary.json").write_text(canonical_json(summarize(rows)) + "\n")
    return rows


def summarize(rows: list[dict]) -> dict:
    out = {}
    for mech in dict.fromkeys(r["mechanism"] for r in rows):
        acc = np.array([r["accuracy"] for r in rows if r["mechanism"] == mech])
        out[mech] = {"runs": int(acc.size), "mean_accuracy": float(acc.mean()),
                     "std_accuracy": float(acc.std())}
    return out


@dataclass
class CopyResult:
    accuracy: float
    chance: float
    spans: dict[str, float]
    dependency_head: str
    dependency_span: float
    head_mass: dict[str, float]


def copy_span_config(distance: int = 4, max_span: int = 16, span_lambda: float = 1e-3,
                     steps: int = 1500, seed: int = 0) -> TrainConfig:
    enc = EncoderConfig(mechanism="span", L=1, max_span=max_span, span_lambda=span_lambda)
    return TrainConfig(encoder=enc, task_kind="copy", copy_distance=distance, steps=steps,
                       eval_interval=250, eval_count=2000, seed=seed)


def dependency_mass(model, cfg: TrainConfig, count: int = 256) -> dict[str, float]:
    """Mean weight each head of the top layer puts on the target token
    when attending from the read-out position."""
    q, v, _ = DataSource(cfg).eval_set(count=count)
    attn = model.lang_layers[-1].attn
    with nx.no_grad():
        model(q, v)
    w = attn.last_weights[:, :, 0, cfg.copy_distance]
    return {f"{attn.name}.{h}": float(w[:, h].mean()) for h in range(attn.heads)}


def run_copy_experiment(cfg: TrainConfig) -> CopyResult:
    """Train a span model on the copy task and report the span of the head
    that carries the dependency."""
    res = train(cfg)
    mass = dependency_mass(res.model, cfg)
    head = max(mass, key=mass.get)
    spans = res.model.head_spans()
    return CopyResult(float(res.final["accuracy"]), 1.0 / cfg.task.n_values, spans, head,
                      spans[head], mass)
