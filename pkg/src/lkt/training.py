"""Adam, warmup/linear-decay schedule, and the early-stopping epoch loop.

The loop is model-agnostic: a *task* object knows how to turn examples into
per-epoch training items, how to compute a summed loss over a micro-batch,
and how to score a validation set. :class:`LktTask`, :class:`DktTask` and
:class:`MlmTask` cover the three models in this package.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataset import mask_responses
from .models import (dkt_batch_loss, dkt_predict, lkt_batch_loss, lkt_predict, mlm_forward_loss,
                     mlm_mask, pad_batch)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    max_epochs: int = 200
    patience: int = 10
    batch_size: int = 32
    micro_batch_size: int = 32
    peak_lr: float = 3e-4
    warmup_steps: int = 200
    seed: int = 0
    precision: str = "float32"
    mask_rate: float = 0.15
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 1 <= self.micro_batch_size <= self.batch_size or self.batch_size % self.micro_batch_size:
            raise ValueError("micro_batch_size must divide batch_size")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def init(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch for {p.name}: param {p.shape}, grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup 0 -> peak over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps < 0:
        raise ValueError("warmup_steps must be >= 0")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak_lr
    return peak_lr * max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def clip_gradients(params, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / (total + 1e-12)
    return total


def binary_log_loss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), nx.BCE_EPS, 1 - nx.BCE_EPS)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


# -- tasks ----------------------------------------------------------------------------

class LktTask:
    """Masked-response training on :class:`~lkt.dataset.LktSequence` windows.

    Validation either scores every interaction with only its own response
    masked (``"each"``, the test protocol) or, cheaper, scores ``val_copies``
    fixed-seed masked copies drawn like training examples (``"sampled"``).
    """

    def __init__(self, mask_rate=0.15, eval_batch_size=64, val_protocol="sampled", val_copies=4,
                 val_seed=2024):
        if val_protocol not in ("each", "sampled"):
            raise ValueError("val_protocol must be 'each' or 'sampled'")
        self.mask_rate = mask_rate
        self.eval_batch_size = eval_batch_size
        self.val_protocol = val_protocol
        self.val_copies = val_copies
        self.val_seed = val_seed

    def epoch_items(self, examples, rng):
        return [mask_responses(s, self.mask_rate, rng) for s in examples]

    def n_targets(self, item):
        return len(item.labels)

    def loss(self, model, items, training, rng, denominator):
        return lkt_batch_loss(model, items, training=training, rng=rng, denominator=denominator)[0]

    def predict(self, model, examples):
        return lkt_predict(model, examples, self.eval_batch_size)[:2]

    def sampled_predict(self, model, examples):
        rng = np.random.default_rng(self.val_seed)
        items = [mask_responses(s, self.mask_rate, rng) for _ in range(self.val_copies) for s in examples]
        scores, labels = [], []
        for start in range(0, len(items), self.eval_batch_size):
            chunk = items[start:start + self.eval_batch_size]
            scores.append(lkt_batch_loss(model, chunk)[1].data.astype(np.float64))
            labels.append(np.concatenate([e.labels for e in chunk]))
        return np.concatenate(scores), np.concatenate(labels)

    def validate(self, model, examples):
        from .evaluation import safe_auc

        if self.val_protocol == "each":
            scores, labels = self.predict(model, examples)
        else:
            scores, labels = self.sampled_predict(model, examples)
        return binary_log_loss(scores, labels), safe_auc(scores, labels)


class DktTask(LktTask):
    val_protocol = "each"

    def __init__(self, eval_batch_size=64):
        self.eval_batch_size = eval_batch_size

    def epoch_items(self, examples, rng):
        return list(examples)

    def n_targets(self, item):
        return int((item.question_indices >= 0).sum())

    def loss(self, model, items, training, rng, denominator):
        return dkt_batch_loss(model, items, denominator=denominator)[0]

    def predict(self, model, examples):
        return dkt_predict(model, examples, self.eval_batch_size)[:2]


class MlmTask:
    """Masked-token pretraining over plain token sequences (``[CLS] ... [EOS]`` id arrays)."""

    def __init__(self, vocab_size, rate=0.15, val_seed=12345):
        self.vocab_size = vocab_size
        self.rate = rate
        self.val_seed = val_seed

    def epoch_items(self, examples, rng):
        return [mlm_mask(s, rng, self.rate, self.vocab_size) for s in examples]

    def n_targets(self, item):
        return len(item[1])

    def loss(self, model, items, training, rng, denominator):
        ids = pad_batch([it[0] for it in items])
        bidx = np.concatenate([np.full(len(it[1]), i) for i, it in enumerate(items)])
        pos = np.concatenate([it[1] for it in items])
        tgt = np.concatenate([it[2] for it in items])
        return mlm_forward_loss(model, ids, (bidx, pos), tgt, training=training, rng=rng,
                                denominator=denominator)

    def validate(self, model, examples):
        items = self.epoch_items(examples, np.random.default_rng(self.val_seed))
        total = sum(self.n_targets(it) for it in items)
        loss = 0.0
        for start in range(0, len(items), 64):
            loss += self.loss(model, items[start:start + 64], False, None, total).item()
        return loss, None


# -- loop -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    @property
    def best_val_auc(self):
        for h in self.history:
            if h["epoch"] == self.best_epoch:
                return h["val_auc"]
        return None


def write_history(history, path, mode="a"):
    with open(path, mode, encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=False) + "\n")


def train(model, train_set: Sequence, val_set: Sequence, config: TrainConfig, task,
          rng: np.random.Generator | None = None) -> TrainResult:
    """Fit ``model`` in place and restore its best-validation-loss parameters.

    Each optimizer step accumulates gradients over micro-batches; every
    micro-batch loss is divided by the target count of the whole batch, so
    the accumulated gradient equals the full-batch gradient.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    dtype = np.float64 if config.precision == "float64" else np.float32
    if model.parameters()[0].data.dtype != dtype:
        for p in model.parameters():
            p.data = p.data.astype(dtype)
    rng = rng or np.random.default_rng(config.seed)
    params = model.parameters()
    state = AdamState.init(params)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.max_epochs * steps_per_epoch
    history = []
    best_state, best_loss, best_epoch, bad = model.state(), math.inf, 0, 0

    with nx.precision(dtype):
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(train_set))
            items = task.epoch_items([train_set[i] for i in order], rng)
            epoch_loss, epoch_targets = 0.0, 0
            lr = 0.0
            for b0 in range(0, len(items), config.batch_size):
                batch = items[b0:b0 + config.batch_size]
                denom = sum(task.n_targets(it) for it in batch)
                model.zero_grad()
                for m0 in range(0, len(batch), config.micro_batch_size):
                    micro = batch[m0:m0 + config.micro_batch_size]
                    with nx.Tape() as tape:
                        loss = task.loss(model, micro, True, rng, denom)
                    nx.backward(tape, loss)
                    epoch_loss += loss.item() * denom
                epoch_targets += denom
                clip_gradients(params, config.clip_norm)
                lr = lr_at(state.step + 1, config.peak_lr, config.warmup_steps, total_steps)
                adam_step(params, [p.grad for p in params], state, lr)
            train_loss = epoch_loss / max(epoch_targets, 1)
            val_loss, val_auc = task.validate(model, val_set)
            row = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                   "val_auc": val_auc, "lr": lr}
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                last = history[-1]["epoch"] if history else 0
                model.load_state(best_state)
                raise TrainingDiverged(f"loss became non-finite at epoch {epoch}; last finite epoch {last}",
                                       history)
            history.append(row)
            log.info("epoch %d train_loss=%.4f val_loss=%.4f val_auc=%s", epoch, train_loss, val_loss,
                     "n/a" if val_auc is None else f"{val_auc:.4f}")
            if val_loss < best_loss:
                best_state, best_loss, best_epoch, bad = model.state(), val_loss, epoch, 0
            else:
                bad += 1
                if bad >= config.patience:
                    break
    model.load_state(best_state)
    return TrainResult(model, history, best_epoch, best_loss)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
