"""Training / evaluation loop, Adam, metrics export."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .adaptive_span import span_penalty
from .flops import count_flops
from .layerdrop import (PRUNED, TRAINING, ConfigError, DropSchedule, format_kept,
                        mask_to_indices, prune_every_other, training_mask)
from .model import (EncoderConfig, build_model, canonical_json, flat_parameters,
                    load_flat_parameters, save_checkpoint)
from .synth_task import SynthExample, TaskSpec, copy_distance_variant, generate, stack

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "split", "loss", "accuracy", "spans", "alphas",
                  "kept_layers", "flops", "ms")
EVAL_SEED_OFFSET = 1 << 32


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    task_kind: str = "vqa"          # vqa | copy
    copy_distance: int = 4
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int = 100
    eval_count: int = 512
    seed: int = 0
    wallclock_in_metrics: bool = False

    def __post_init__(self):
        if self.task_kind not in ("vqa", "copy"):
            raise ConfigError("task_kind must be 'vqa' or 'copy'")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1 or self.eval_count < 1:
            raise ConfigError("steps, batch_size, eval_interval and eval_count must be >= 1")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid optimizer settings")
        if self.encoder.span_lambda < 0:
            raise ConfigError("span_lambda must be >= 0")
        self._sync_encoder()

    def _sync_encoder(self) -> None:
        enc = self.encoder
        if self.task_kind == "copy":
            if not 0 <= self.copy_distance < self.task.question_len:
                raise ConfigError("copy_distance must be in [0, question_len)")
            enc.arch = "language"
            enc.vocab_size = enc.num_classes = self.task.n_values
        else:
            enc.vocab_size = self.task.vocab_size
            enc.vision_dim = self.task.vision_dim
            enc.num_classes = self.task.num_classes
            enc.max_slots = self.task.n_slots
        enc.max_text_len = self.task.question_len
        enc.seed = self.seed
        enc.validate()

    # flat canonical JSON mirrors every field at top level
    _DERIVED = ("vocab_size", "vision_dim", "num_classes", "max_text_len", "max_slots", "seed",
                "arch")

    def to_flat(self) -> dict:
        flat = {k: v for k, v in asdict(self).items() if k not in ("encoder", "task")}
        flat.update({k: v for k, v in self.encoder.to_dict().items() if k not in self._DERIVED})
        flat.update(self.task.to_dict())
        return flat

    @classmethod
    def from_flat(cls, raw: dict) -> "TrainConfig":
        enc_keys = {f.name for f in fields(EncoderConfig)} - set(cls._DERIVED)
        task_keys = {f.name for f in fields(TaskSpec)}
        top_keys = {f.name for f in fields(cls)} - {"encoder", "task"}
        unknown = set(raw) - enc_keys - task_keys - top_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            enc = EncoderConfig(**{k: raw[k] for k in raw if k in enc_keys})
            task = TaskSpec(**{k: raw[k] for k in raw if k in task_keys})
            return cls(encoder=enc, task=task, **{k: raw[k] for k in raw if k in top_keys})
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_flat(raw)


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- data -----------------------------------------------------------------

class DataSource:
    """Random-access training/eval examples for a TrainConfig."""

    def __init__(self, cfg: TrainConfig, examples: list[SynthExample] | None = None):
        self.cfg = cfg
        self.examples = examples

    def _gen(self, seed: int, start: int, count: int) -> list[SynthExample]:
        c = self.cfg
        if c.task_kind == "copy":
            return list(copy_distance_variant(seed, count, c.copy_distance, c.task.question_len,
                                              c.task.n_values, start=start))
        return list(generate(seed, count, c.task, start=start))

    def train_batch(self, step: int):
        b = self.cfg.batch_size
        if self.examples:
            n = len(self.examples)
            return stack([self.examples[(step * b + i) % n] for i in range(b)])
        return stack(self._gen(self.cfg.seed, step * b, b))

    def eval_set(self, seed: int | None = None, count: int | None = None):
        seed = self.cfg.seed + EVAL_SEED_OFFSET if seed is None else seed
        return stack(self._gen(seed, 0, count or self.cfg.eval_count))


def evaluate(model, questions, vision, answers, kept=None, batch: int = 256) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) without building a tape."""
    losses, correct = [], 0
    with nx.no_grad():
        for i in range(0, len(answers), batch):
            logits = model(questions[i:i + batch], vision[i:i + batch], kept=kept)
            losses.append(nx.cross_entropy(logits, answers[i:i + batch]).item()
                          * len(answers[i:i + batch]))
            correct += int((logits.data.argmax(axis=-1) == answers[i:i + batch]).sum())
    return sum(losses) / len(answers), correct / len(answers)


def eval_kept(model) -> dict[str, list[int]] | None:
    cfg = model.config
    if cfg.layerdrop != "train+prune":
        return None
    return prune_every_other(DropSchedule(cfg.stream_layers,
                                          {s: cfg.stream_drops[s] for s in cfg.stream_layers},
                                          PRUNED, cfg.seed))


# -- metrics ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def _join(d: dict[str, float]) -> str:
    return ";".join(f"{k}={_fmt(v)}" for k, v in d.items())


class MetricsWriter:
    def __init__(self, out_dir: Path | None):
        self.rows: list[dict] = []
        self.span_rows: list[tuple] = []
        self.alpha_rows: list[tuple] = []
        self.out_dir = out_dir

    def add(self, row: dict, epoch: int, spans: dict, alphas: dict, seq_len: int) -> None:
        self.rows.append(row)
        if row["split"] != "eval":
            return
        for key, v in spans.items():
            stream, layer, head = key.split(".")
            self.span_rows.append((epoch, stream, layer, head, _fmt(v), _fmt(min(v, seq_len))))
        for key, v in alphas.items():
            stream, layer, head = key.split(".")
            self.alpha_rows.append((epoch, stream, layer, head, _fmt(v)))

    @staticmethod
    def _csv(header, rows) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()

    def metrics_csv(self) -> str:
        return self._csv(METRIC_COLUMNS, [[r[c] for c in METRIC_COLUMNS] for r in self.rows])

    def flush(self) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "metrics.csv").write_text(self.metrics_csv())
        (self.out_dir / "spans.csv").write_text(self._csv(
            ("epoch", "stream", "layer", "head", "span", "span_clipped"), self.span_rows))
        (self.out_dir / "alphas.csv").write_text(self._csv(
            ("epoch", "stream", "layer", "head", "alpha"), self.alpha_rows))


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    final: dict
    metrics: MetricsWriter
    steps_to_90: int | None = None


def _seq_lens(cfg: TrainConfig):
    return (cfg.task.question_len, cfg.task.n_slots)


def train(cfg: TrainConfig, out_dir=None, examples: list[SynthExample] | None = None,
          model=None) -> TrainResult:
    """Adam over streamed synthetic batches; single-threaded and seeded.

    Writes metrics.csv, spans.csv, alphas.csv, model.ckpt and final.json
    into ``out_dir`` when given.  A non-finite loss aborts with the
    last good parameters saved and raises :class:`NumericFailure`.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    model = model or build_model(cfg.encoder)
    enc = model.config
    params = model.parameters()
    opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps)
    data = DataSource(cfg, examples)
    eval_q, eval_v, eval_a = data.eval_set()
    writer = MetricsWriter(out_dir)
    spans_list = model.span_params()
    layers = enc.stream_layers
    drop_sched = None
    if enc.layerdrop in ("train", "train+prune"):
        drop_sched = DropSchedule(layers, {s: enc.stream_drops[s] for s in layers}, TRAINING,
                                  cfg.seed)
    last_good = flat_parameters(model).copy()
    run_loss = run_correct = run_n = 0.0
    run_flops = 0
    t0 = time.perf_counter()
    steps_to_90 = None
    final: dict = {}

    for step in range(1, cfg.steps + 1):
        q, v, a = data.train_batch(step - 1)
        kept = mask_to_indices(training_mask(drop_sched, step)) if drop_sched else None
        model.zero_grad()
        try:
            logits = model(q, v, kept=kept)
            task_loss = nx.cross_entropy(logits, a)
            loss = task_loss
            if spans_list and enc.span_lambda > 0:
                loss = loss + span_penalty(spans_list, enc.span_lambda)
            finite = math.isfinite(loss.item())
            reason = "non-finite loss"
        except nx.NumericDomainError as exc:
            finite, reason = False, str(exc)
        if not finite:
            load_flat_parameters(model, last_good)
            if out_dir is not None:
                writer.flush()
                out_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(model, out_dir / "model.ckpt", _ckpt_extra(cfg))
            raise NumericFailure(f"{reason} at step {step}; last good parameters saved")
        last_good[...] = flat_parameters(model)
        loss.backward()
        opt.step()
        model.clamp_spans()

        run_loss += task_loss.item() * len(a)
        run_correct += float((logits.data.argmax(-1) == a).sum())
        run_n += len(a)
        run_flops += count_flops(model, _seq_lens(cfg), span_aware=True, kept=kept)["total"]

        if step % cfg.eval_interval == 0 or step == cfg.steps:
            epoch = (step + cfg.eval_interval - 1) // cfg.eval_interval
            spans, alphas = model.head_spans(), model.head_alphas()
            ms = (time.perf_counter() - t0) * 1000.0
            ms_field = f"{ms:.1f}" if cfg.wallclock_in_metrics else ""
            n_steps = step - (epoch - 1) * cfg.eval_interval
            writer.add({"step": step, "split": "train", "loss": _fmt(run_loss / run_n),
                        "accuracy": _fmt(run_correct / run_n), "spans": _join(spans),
                        "alphas": _join(alphas), "kept_layers": format_kept(kept, layers),
                        "flops": str(run_flops // max(n_steps, 1)), "ms": ms_field},
                       epoch, spans, alphas, cfg.task.question_len)
            ekept = eval_kept(model)
            eloss, eacc = evaluate(model, eval_q, eval_v, eval_a, kept=ekept)
            eflops = count_flops(model, _seq_lens(cfg), span_aware=True, kept=ekept)["total"]
            row = {"step": step, "split": "eval", "loss": _fmt(eloss), "accuracy": _fmt(eacc),
                   "spans": _join(spans), "alphas": _join(alphas),
                   "kept_layers": format_kept(ekept, layers), "flops": str(eflops),
                   "ms": ms_field}
            writer.add(row, epoch, spans, alphas, cfg.task.question_len)
            log.info("step %d loss %.4f eval acc %.4f", step, run_loss / run_n, eacc)
            if steps_to_90 is None and eacc >= 0.9:
                steps_to_90 = step
            final = dict(row, spans=spans, alphas=alphas, fallback_rows=model.fallback_rows(),
                         wallclock_ms=ms)
            run_loss = run_correct = run_n = 0.0
            run_flops = 0
            writer.flush()

    final["steps_to_90"] = steps_to_90
    if out_dir is not None:
        save_checkpoint(model, out_dir / "model.ckpt", _ckpt_extra(cfg))
        (out_dir / "final.json").write_text(canonical_json(final) + "\n")
    return TrainResult(model, final, writer, steps_to_90)


def _ckpt_extra(cfg: TrainConfig) -> dict:
    return {"train_config": cfg.to_flat()}
