"""Adapter-only training: schedule, optimizer, step loop, and evaluation.

Only tensors enumerated by the model as trainable are ever updated; the
frozen base stays bitwise intact across any number of steps. The loop is
single-threaded and fully deterministic per seed, which the tests rely on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .adapters import ConfigurationError
from .model import DecoderModel
from .taskgen import VOCAB, TaskSample, Vocabulary
from .tensor import Tensor, cross_entropy, rows_select


class TrainingError(RuntimeError):
    """Raised when training hits a non-finite loss or a contract violation."""


@dataclass
class TrainConfig:
    lr: float = 2e-4
    warmup_ratio: float = 0.03
    schedule: str = "cosine"
    batch_size: int = 8
    epochs: int = 1
    max_seq_len: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigurationError(
                f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if self.schedule != "cosine":
            raise ConfigurationError(
                f"unsupported schedule {self.schedule!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr, then cosine decay from lr to 0.

    Warmup spans ceil(warmup_ratio * total_steps) steps; the value is
    continuous at the boundary and exactly 0 at step == total_steps.
    """
    if total_steps < 1:
        raise TrainingError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise TrainingError(
            f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(cfg.warmup_ratio * total_steps) if cfg.warmup_ratio > 0 else 0
    if warmup and step <= warmup:
        return cfg.lr * step / warmup
    if total_steps == warmup:
        return cfg.lr
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay over a fixed tensor list.

    Tensors whose grad is absent for a step are skipped entirely (their
    moments do not decay), matching the usual sparse-adapter behavior.
    """

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def _clip(self) -> None:
        limit = self.cfg.grad_clip
        if limit is None:
            return
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if norm > limit:
            factor = limit / norm
            for p in self.params:
                if p.grad is not None:
                    p.grad *= factor

    def step(self, lr: float) -> None:
        self._clip()
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.cfg.eps)
            if self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def sample_loss_parts(model: DecoderModel, sample: TaskSample,
                      trace=None) -> tuple[Tensor, int]:
    """Masked next-token loss for one sample: (mean-CE tensor, token count)."""
    tokens = sample.tokens
    inputs = tokens[:-1]
    logits = model.forward(inputs, trace=trace)
    rows = [j for j in range(len(inputs)) if sample.loss_mask[j + 1]]
    targets = [tokens[j + 1] for j in rows]
    return cross_entropy(rows_select(logits, rows), targets), len(rows)


def batch_loss(model: DecoderModel, batch: list[TaskSample],
               trace=None) -> Tensor:
    """Mean masked cross-entropy over all target tokens in the batch."""
    if not batch:
        raise TrainingError("empty batch")
    total = None
    count = 0
    for sample in batch:
        mean_ce, n = sample_loss_parts(model, sample, trace)
        part = mean_ce * float(n)
        total = part if total is None else total + part
        count += n
    return total * (1.0 / count)


def train_step(model: DecoderModel, batch: list[TaskSample],
               optimizer: AdamW, lr: float) -> float:
    """One optimization step; only trainable tensors move."""
    loss = batch_loss(model, batch)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value!r}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    optimizer.zero_grad()
    return value


def run_training(model: DecoderModel, train_set: list[TaskSample],
                 cfg: TrainConfig, log_path=None) -> list[tuple[int, float, float]]:
    """Epoch loop with per-epoch deterministic reshuffling.

    Returns [(step, lr, loss)] and optionally writes the same records as a
    CSV with header.
    """
    optimizer = AdamW(model.trainable_parameters(), cfg)
    n = len(train_set)
    if n == 0:
        raise TrainingError("empty training set")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    history: list[tuple[int, float, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            lr = lr_at(step, total_steps, cfg)
            try:
                loss = train_step(model, batch, optimizer, lr)
            except TrainingError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            history.append((step, lr, loss))
            step += 1
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("step,lr,loss\n")
            for s, lr, loss in history:
                fh.write(f"{s},{lr!r},{loss!r}\n")
    return history


def evaluate(model: DecoderModel, dataset: list[TaskSample],
             vocab: Vocabulary = VOCAB, trace=None) -> dict:
    """Mean masked loss plus per-task greedy exact-match.

    A sample matches when greedy decoding from its prompt reproduces the
    target string exactly (decoding stops at end-of-sequence).
    """
    if not dataset:
        raise TrainingError("empty evaluation set")
    loss_sum = 0.0
    token_count = 0
    matches: dict[str, list[bool]] = {}
    for sample in dataset:
        if trace is not None and hasattr(trace, "set_context"):
            trace.set_context(sample.task_id)
        mean_ce, n = sample_loss_parts(model, sample, trace)
        loss_sum += mean_ce.item() * n
        token_count += n
        decoded = model.generate(sample.prompt, max_new=len(sample.target) + 2,
                                 eos_id=vocab.eos_id)
        new = decoded[len(sample.prompt):]
        text = vocab.decode([t for t in new if t != vocab.eos_id])
        matches.setdefault(sample.task_id, []).append(
            text == sample.target_string(vocab) and vocab.eos_id in new)
    exact = {task: float(np.mean(vals)) for task, vals in matches.items()}
    return {
        "loss": loss_sum / token_count,
        "exact_match": exact,
        "exact_match_overall": float(
            np.mean([m for vals in matches.values() for m in vals])),
    }
