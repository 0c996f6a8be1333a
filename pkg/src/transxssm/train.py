"""Training loop: AdamW, warmup + cosine schedule, JSONL metrics.

Batches are generated from a stream keyed by (seed, step, slot), so a run is
a pure function of its config: the same seed in single-worker mode produces
bit-identical metric values. With workers > 1 a bounded-queue prefetch
thread builds the same batches ahead of the trainer in step order, which
keeps the stream identical while overlapping generation with optimisation.

Throughput (tokens_per_sec) is wall-clock telemetry; ``log_timing=False``
nulls that field so the emitted log is byte-reproducible.
"""

from __future__ import annotations

import json
import math
import queue
import threading
import time
from dataclasses import dataclass, asdict, replace

import numpy as np

from .autodiff import backward
from .data import TaskInstance, make_bytes_task, make_copy_task, make_needle_task
from .lm import LMParams, ModelConfig, Tables, model_forward, named_parameters
from .tensor import NonFiniteError, Rng, Tensor, cross_entropy, no_grad

__all__ = [
    "TrainConfig",
    "TrainDivergence",
    "lr_at",
    "AdamW",
    "train",
    "make_batch",
    "evaluate_loss",
    "masked_accuracy",
]


@dataclass
class TrainConfig:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.10
    cosine_floor_frac: float = 0.10
    grad_clip: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 32
    task: str = "copy"
    task_vocab: int = 64
    seed: int = 1
    workers: int = 1
    queue_capacity: int = 4
    log_timing: bool = True

    def __post_init__(self):
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainDivergence(RuntimeError):
    """Raised when the loss goes non-finite; carries the failing step."""


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to the floor at the last step."""
    if cfg.steps <= 0:
        return 0.0
    warmup = int(round(cfg.warmup_frac * cfg.steps))
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    floor = cfg.cosine_floor_frac * cfg.lr
    span = max(1, cfg.steps - 1 - warmup)
    progress = min(1.0, (step - warmup) / span)
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices only."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay > 0 and p.data.ndim >= 2:
                update = update + c.weight_decay * p.data
            p.data -= lr * update


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm; returns the raw norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale  # grads may be shared views; never scale in place
    return norm


def make_task(rng: Rng, cfg: TrainConfig, corpus: bytes | None = None) -> TaskInstance:
    if cfg.task == "copy":
        return make_copy_task(rng, cfg.seq_len, vocab=cfg.task_vocab)
    if cfg.task == "needle":
        return make_needle_task(rng, cfg.seq_len)
    if cfg.task == "bytes":
        if corpus is None:
            raise ValueError("bytes task requires a corpus")
        return make_bytes_task(rng, corpus, cfg.seq_len)
    raise ValueError(f"unknown task {cfg.task!r}")


def make_batch(step: int, cfg: TrainConfig, corpus: bytes | None = None):
    """Batch for one step, keyed purely by (seed, step, slot)."""
    base = Rng(cfg.seed)
    tasks = [make_task(base.child(step, i), cfg, corpus) for i in range(cfg.batch_size)]
    inputs = np.stack([t.inputs for t in tasks])
    targets = np.stack([t.targets for t in tasks])
    masks = np.stack([t.loss_mask for t in tasks])
    return inputs, targets, masks


def _batch_stream(cfg: TrainConfig, corpus: bytes | None):
    """Yield (step, batch) in order; prefetched on a thread when workers > 1."""
    if cfg.workers <= 1:
        for step in range(cfg.steps):
            yield step, make_batch(step, cfg, corpus)
        return

    q: queue.Queue = queue.Queue(maxsize=cfg.queue_capacity)

    def producer():
        for step in range(cfg.steps):
            q.put((step, make_batch(step, cfg, corpus)))
        q.put(None)

    thread = threading.Thread(target=producer, daemon=True)
    thread.start()
    while True:
        item = q.get()
        if item is None:
            break
        yield item


def train(
    params: LMParams,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    tables: Tables,
    metrics_path: str | None = None,
    corpus: bytes | None = None,
    on_step=None,
) -> list[dict]:
    """Run the optimisation loop; returns (and optionally writes) the metrics log."""
    named = named_parameters(params)
    opt = AdamW(named, tcfg)
    metrics: list[dict] = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for step, (inputs, targets, masks) in _batch_stream(tcfg, corpus):
            t0 = time.perf_counter()
            try:
                logits = model_forward(inputs, params, mcfg, tables)
                loss = cross_entropy(logits, targets, masks)
            except NonFiniteError as e:
                raise TrainDivergence(f"non-finite loss at step {step}: {e}") from e
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainDivergence(f"non-finite loss at step {step}")
            backward(loss, named)
            grad_norm = clip_gradients(named, tcfg.grad_clip)
            if not math.isfinite(grad_norm):
                raise TrainDivergence(f"non-finite gradient norm at step {step}")
            lr = lr_at(step, tcfg)
            opt.step(lr)
            dt = time.perf_counter() - t0
            tokens = int(inputs.shape[0] * inputs.shape[1])
            record = {
                "step": step,
                "loss": loss_val,
                "lr": lr,
                "grad_norm": grad_norm,
                "tokens_per_sec": (tokens / dt) if tcfg.log_timing else None,
            }
            metrics.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(step, record)
    finally:
        if sink:
            sink.close()
    return metrics


def evaluate_loss(params, mcfg, tables, batches) -> float:
    """Mean loss over pre-built (inputs, targets, masks) batches."""
    losses = []
    with no_grad():
        for inputs, targets, masks in batches:
            logits = model_forward(inputs, params, mcfg, tables)
            losses.append(cross_entropy(logits, targets, masks).item())
    return float(np.mean(losses))


def masked_accuracy(params, mcfg, tables, batches) -> float:
    """Fraction of masked positions where argmax(logits) equals the target."""
    hit = total = 0
    with no_grad():
        for inputs, targets, masks in batches:
            logits = model_forward(inputs, params, mcfg, tables)
            pred = np.argmax(logits.data, axis=-1)
            sel = masks > 0
            hit += int((pred[sel] == targets[sel]).sum())
            total += int(sel.sum())
    return hit / max(1, total)
