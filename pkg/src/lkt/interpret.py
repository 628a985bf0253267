"""Attention maps, LIME-style local explanations and embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .models import LktModel, lkt_forward, pad_batch, predict_masked_correctness
from .tokenizer import MASK, PAD, SPECIAL_TOKENS, UNK


@dataclass
class AttentionSummary:
    layer: int
    head: int
    scores: np.ndarray
    tokens: list

    def to_json(self) -> str:
        return json.dumps({"layer": self.layer, "head": self.head,
                           "tokens": [{"token": t, "score": float(s)}
                                      for t, s in zip(self.tokens, self.scores)]})


@dataclass
class Explanation:
    positions: np.ndarray
    tokens: list
    weights: np.ndarray
    intercept: float
    r2: float
    num_samples: int
    kernel_width: float

    def to_json(self) -> str:
        return json.dumps({
            "intercept": self.intercept, "r2": self.r2, "num_samples": self.num_samples,
            "kernel_width": self.kernel_width,
            "tokens": [{"position": int(p), "token": t, "weight": float(w)}
                       for p, t, w in zip(self.positions, self.tokens, self.weights)],
        })

    def ranked(self):
        order = np.argsort(-np.abs(self.weights), kind="stable")
        return [(self.tokens[i], float(self.weights[i])) for i in order]


def _token_strings(ids, vocab):
    if vocab is None:
        return [str(int(i)) for i in ids]
    return [vocab.tokens[int(i)] for i in ids]


def mean_attention(model: LktModel, token_ids, layer: int = 0, head: int = 0, vocab=None) -> AttentionSummary:
    """Attention received by each key position, averaged over the unpadded queries."""
    cfg = model.config
    if not 0 <= layer < cfg.num_layers:
        raise IndexError(f"layer {layer} out of range for {cfg.num_layers} layers")
    if not 0 <= head < cfg.num_heads:
        raise IndexError(f"head {head} out of range for {cfg.num_heads} heads")
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    out = lkt_forward(model, ids[None, :], keep_attention=True)
    att = out.attentions[layer][0, head].astype(np.float64)
    queries = ids != PAD
    scores = att[queries].mean(axis=0)
    return AttentionSummary(layer, head, scores, _token_strings(ids, vocab))


def model_scorer(model: LktModel, target_position: int) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap an LKT model as ``ids[n, L] -> P(correct at target_position)``."""

    def score(batch):
        probs = []
        for start in range(0, len(batch), 128):
            chunk = batch[start:start + 128]
            out = lkt_forward(model, chunk)
            probs.append(predict_masked_correctness(out, np.arange(len(chunk)),
                                                    np.full(len(chunk), target_position)).data)
        return np.concatenate(probs).astype(np.float64)

    return score


def lime_explain(model, token_ids, target_position: int, num_samples: int = 1000,
                 kernel_width: float | None = None, seed: int = 0, ridge: float = 1e-3,
                 vocab=None) -> Explanation:
    """Local linear surrogate of the correctness prediction at ``target_position``.

    Each perturbation drops a random subset of the ordinary tokens by
    replacing them with [UNK]. The surrogate is a ridge regression of the
    model output on the presence indicators, weighted by
    ``exp(-hamming(z, 1)**2 / kernel_width**2)``. ``model`` is an
    :class:`LktModel` or any callable ``ids[n, L] -> probabilities``.
    """
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids[target_position] != MASK:
        raise ValueError(f"target position {target_position} does not hold [MASK]")
    if num_samples < 50:
        raise ValueError("num_samples must be >= 50")
    scorer = model_scorer(model, target_position) if isinstance(model, LktModel) else model
    positions = np.flatnonzero(ids >= len(SPECIAL_TOKENS))
    d = len(positions)
    if d == 0:
        raise ValueError("degenerate design: no perturbable tokens")
    width = 0.75 * np.sqrt(d) if kernel_width is None else float(kernel_width)

    rng = np.random.default_rng(seed)
    z = np.ones((num_samples, d), dtype=np.float64)
    for row in z[1:]:
        k = rng.integers(1, d + 1)
        row[rng.choice(d, size=k, replace=False)] = 0.0
    if np.all(z == z[0]):
        raise ValueError("degenerate design: all perturbation samples are identical")
    batch = np.repeat(ids[None, :], num_samples, axis=0)
    rows, cols = np.nonzero(z == 0)
    batch[rows, positions[cols]] = UNK
    y = np.asarray(scorer(batch), dtype=np.float64).reshape(-1)

    dist = d - z.sum(axis=1)
    w = np.exp(-(dist ** 2) / width ** 2)
    x = np.hstack([np.ones((num_samples, 1)), z])
    xw = x * w[:, None]
    penalty = ridge * np.eye(d + 1)
    penalty[0, 0] = 0.0  # intercept is not shrunk
    beta = np.linalg.solve(x.T @ xw + penalty, xw.T @ y)
    fitted = x @ beta
    ybar = np.average(y, weights=w)
    ss_tot = float((w * (y - ybar) ** 2).sum())
    ss_res = float((w * (y - fitted) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return Explanation(positions, _token_strings(ids[positions], vocab), beta[1:], float(beta[0]), r2,
                       num_samples, width)


def export_embeddings(model: LktModel, examples: Sequence, position_rule: str = "mask"):
    """Final-layer hidden state per example at its first [MASK] or at [CLS].

    Returns rows ``(student_id, vector, y_hat)`` where ``y_hat`` is the
    predicted correctness at the first masked position.
    """
    if position_rule not in ("mask", "cls"):
        raise ValueError("position_rule must be 'mask' or 'cls'")
    rows = []
    for start in range(0, len(examples), 64):
        chunk = examples[start:start + 64]
        out = lkt_forward(model, pad_batch([e.token_ids for e in chunk]))
        first = np.asarray([e.mask_positions[0] for e in chunk])
        bidx = np.arange(len(chunk))
        probs = predict_masked_correctness(out, bidx, first).data
        where = first if position_rule == "mask" else np.zeros(len(chunk), dtype=np.int64)
        vecs = out.hidden.data[bidx, where]
        for e, v, p in zip(chunk, vecs, probs):
            rows.append((e.student_id, v.astype(np.float64), float(p)))
    return rows


def write_embeddings_csv(rows, path) -> None:
    d = len(rows[0][1]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id"] + [f"e{i}" for i in range(d)] + ["y_hat"])
        for sid, vec, p in rows:
            w.writerow([sid] + [repr(float(x)) for x in vec] + [repr(p)])
