"""Mini-batch training loop with gradient accumulation and best-dev selection."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import QuestionSample, evaluate
from .kgstore import KnowledgeGraph
from .model import AdamState, ModelParams, adam_step, loss_and_grad

LOG_LINE = re.compile(r"^step=(\d+) loss=(\S+) dev_hits1=(\S+)$")


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    variant: str = "intersect"
    steps: int = 40000
    batch_size: int = 4
    grad_accum: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eps: float = 1e-6
    seed: int = 0
    eval_every: int = 100
    workers: int = 1


@dataclass
class TrainResult:
    params: ModelParams  # best-dev parameters
    final_params: ModelParams
    losses: list[float]  # mean loss of each optimizer step, step 1 first
    initial_loss: float
    log_lines: list[str] = field(default_factory=list)
    best_step: int = 0
    best_dev: float = -1.0


def format_log_line(step: int, loss: float, dev_hits1: float) -> str:
    return f"step={step} loss={loss:.6f} dev_hits1={dev_hits1:.4f}"


def parse_log_line(line: str) -> tuple[int, float, float]:
    m = LOG_LINE.match(line.strip())
    if not m:
        raise ValueError(f"not a metrics line: {line!r}")
    return int(m.group(1)), float(m.group(2)), float(m.group(3))


def sample_stream(n: int, seed: int) -> Iterator[int]:
    """Endless epoch-wise shuffled indices."""
    rng = np.random.default_rng(seed)
    while True:
        yield from rng.permutation(n).tolist()


def batch_gradient(params, kg, batch: Sequence[QuestionSample], cfg: TrainConfig):
    total = None
    losses = []
    for s in batch:
        loss, g = loss_and_grad(params, kg, s, cfg.variant, cfg.eps, cfg.workers)
        losses.append(loss)
        if total is None:
            total = g
        else:
            for k in total:
                total[k] = total[k] + g[k]
    n = len(batch)
    return float(np.mean(losses)), {k: v / n for k, v in total.items()}


def window_means(values: Sequence[float], window: int) -> list[float]:
    """Means of consecutive non-overlapping windows; a trailing partial window is dropped."""
    return [float(np.mean(values[i : i + window])) for i in range(0, len(values) - window + 1, window)]


def train(
    params: ModelParams,
    kg: KnowledgeGraph,
    train_samples: Sequence[QuestionSample],
    dev_samples: Sequence[QuestionSample],
    cfg: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` optimizer updates of ``batch_size * grad_accum`` samples each.

    Every ``eval_every`` steps a metrics line is emitted whose loss is the mean
    over the steps since the previous line. The returned ``params`` are the
    ones with the highest dev Hits@1 (later steps win ties).
    """
    if not train_samples:
        raise ValueError("no training samples")
    stream = sample_stream(len(train_samples), cfg.seed)
    per_step = cfg.batch_size * cfg.grad_accum

    def next_batch():
        return [train_samples[next(stream)] for _ in range(per_step)]

    def dev_hits(p):
        return evaluate(cfg.variant, p, kg, dev_samples, cfg.eps).hits_at_1 if dev_samples else 0.0

    lines: list[str] = []

    def emit(line):
        lines.append(line)
        if log is not None:
            log(line)

    state = AdamState()
    batch = next_batch()
    loss0, _ = batch_gradient(params, kg, batch, cfg)
    best, best_step = params, 0
    best_dev = dev_hits(params)
    emit(format_log_line(0, loss0, best_dev))

    losses: list[float] = []
    for step in range(1, cfg.steps + 1):
        loss, grads = batch_gradient(params, kg, batch, cfg)
        if not math.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        params, state = adam_step(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            dev = dev_hits(params)
            since = losses[-(step - (step - 1) // cfg.eval_every * cfg.eval_every):]
            emit(format_log_line(step, float(np.mean(since)), dev))
            if dev >= best_dev:
                best, best_step, best_dev = params, step, dev
        if step < cfg.steps:
            batch = next_batch()
    return TrainResult(best, params, losses, loss0, lines, best_step, best_dev)
