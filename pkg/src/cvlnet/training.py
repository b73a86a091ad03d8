"""Optimizer, learning-rate schedule, sample augmentation and training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .data_io import MemeBatch
from .errors import ConfigError, NonFiniteGradientError
from .evaluation import MetricsReport, PredictionSet, evaluate
from .model import CvlModel, forward, loss, predict, save_checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 80
    lr_dual: float = 1e-5
    lr_single: float = 5e-5
    warmup_steps: int = 2000
    total_steps: int = 22000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment_prob: float = 0.0
    seed: int = 0
    log_every: int = 100
    eval_every: int = 1000
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps must not exceed total_steps")
        if self.lr_dual <= 0 or self.lr_single <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ConfigError("augment_prob must lie in [0, 1]")


def lr_at(step: int, base_lr: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then linear decay to 0 at ``total_steps``."""
    if step <= 0:
        return 0.0 if cfg.warmup_steps > 0 else base_lr
    if step >= cfg.total_steps:
        return 0.0
    if step <= cfg.warmup_steps:
        return base_lr * step / cfg.warmup_steps
    return base_lr * (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float | Mapping[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``lr`` may map parameter names to their own rates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        rate = lr[name] if isinstance(lr, Mapping) else lr
        p -= rate * (m / c1) / (np.sqrt(v / c2) + eps)


def augment_batch(batch: MemeBatch, p: float, rng: np.random.Generator) -> MemeBatch:
    """Re-pair samples with the visual features of another same-label sample.

    With probability ``p`` each sample takes the ROI features, boxes,
    contextual feature and ROI mask of a different sample with the same
    label, chosen uniformly. Text and label stay. Samples without a
    same-label partner are left alone. The input batch is not modified.
    """
    if p <= 0 or batch.labels is None:
        return batch
    labels = batch.labels
    source = np.arange(len(batch))
    for i in range(len(batch)):
        partners = np.flatnonzero((labels == labels[i]) & (np.arange(len(batch)) != i))
        if labels[i] < 0 or partners.size == 0:
            continue
        if rng.random() < p:
            source[i] = partners[int(rng.integers(0, partners.size))]
    if np.array_equal(source, np.arange(len(batch))):
        return batch
    return MemeBatch(
        list(batch.ids), batch.token_ids, batch.symbols, batch.text_mask,
        batch.roi_features[source], batch.boxes[source], batch.contextual[source], batch.roi_mask[source],
        batch.labels,
    )


@dataclass
class TrainResult:
    losses: list[tuple[int, float, float, float]]
    val_history: list[tuple[int, MetricsReport]]

    def trace_lines(self) -> list[str]:
        return [format_trace_line(*row) for row in self.losses]

    def best_val_auroc(self) -> float | None:
        values = [r.auroc for _, r in self.val_history if r.auroc is not None]
        return max(values) if values else None


def format_trace_line(step: int, loss_value: float, lr_dual: float, lr_single: float) -> str:
    return f"step {step} loss {loss_value!r} lr_dual {lr_dual!r} lr_single {lr_single!r}"


def _batch_order(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    cursor = 0
    size = min(batch_size, n)
    for _ in range(steps):
        if cursor + size > n:
            perm = rng.permutation(n)
            cursor = 0
        yield perm[cursor : cursor + size]
        cursor += size


def train(
    model: CvlModel,
    data: MemeBatch,
    cfg: TrainConfig,
    val: MemeBatch | None = None,
    on_log: Callable[[str], None] | None = None,
    checkpoint_path=None,
) -> TrainResult:
    """Run ``cfg.total_steps`` Adam steps over seeded shuffled batches.

    Single-stream parameters use ``lr_single``; everything else, the heads
    included, uses ``lr_dual``. A trace row is kept every ``log_every``
    steps and at the last step; validation runs every ``eval_every`` steps
    and at the end when ``val`` is given.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if data.labels is None or np.any(data.labels < 0):
        raise ConfigError("training set has unlabeled samples")
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    named = model.trainable_parameters()
    streams = {name: CvlModel.stream_of(name) for name, _ in named}
    params = {name: t.data for name, t in named}
    state = OptimizerState()
    losses: list[tuple[int, float, float, float]] = []
    history: list[tuple[int, MetricsReport]] = []
    for step, index in enumerate(_batch_order(len(data), cfg.batch_size, cfg.total_steps, rng), 1):
        batch = augment_batch(data.take(index), cfg.augment_prob, aug_rng)
        model.zero_grad()
        value = loss(forward(batch, model), batch.labels)
        value.backward()
        lr_d = lr_at(step, cfg.lr_dual, cfg)
        lr_s = lr_at(step, cfg.lr_single, cfg)
        rates = {name: (lr_s if s == "single" else lr_d) for name, s in streams.items()}
        adam_step(params, {name: t.grad for name, t in named}, state, rates,
                  cfg.beta1, cfg.beta2, cfg.adam_eps)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.total_steps:
            row = (step, value.item(), lr_d, lr_s)
            losses.append(row)
            if on_log is not None:
                on_log(format_trace_line(*row))
        if val is not None and (step % cfg.eval_every == 0 or step == cfg.total_steps):
            history.append((step, evaluate(PredictionSet.from_batch(val, predict(val, model)))))
        if checkpoint_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(losses, history)
