"""LKT transformer encoder, its response / MLM heads, and the DKT baseline."""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataset import SENTINEL, DktExample, LktExample, LktSequence, mask_targets
from .numerics import Tensor
from .tokenizer import MASK, PAD, SPECIAL_TOKENS


@dataclass
class LktConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    d_ff: int = 256
    max_len: int = 512
    dropout_p: float = 0.1
    head_type: str = "response"
    # "alibi": fixed per-head distance penalty on attention logits, on top of
    # the learned absolute positions; "none": plain dot-product attention
    attention_bias: str = "alibi"

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if self.head_type not in ("response", "mlm"):
            raise ValueError(f"head_type must be 'response' or 'mlm', got {self.head_type!r}")
        if self.attention_bias not in ("alibi", "none"):
            raise ValueError(f"attention_bias must be 'alibi' or 'none', got {self.attention_bias!r}")


@dataclass
class DktConfig:
    num_questions: int
    hidden: int = 64


class _Model:
    kind = ""

    def __init__(self, config, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        params = OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k, dtype=v.dtype))
                             for k, v in self.params.items())
        return type(self)(dataclasses.replace(self.config), params)

    def astype(self, dtype):
        params = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True, name=k, dtype=dtype))
                             for k, v in self.params.items())
        return type(self)(dataclasses.replace(self.config), params)

    def load_state(self, state: dict):
        for k, v in state.items():
            self.params[k].data[...] = v

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __getitem__(self, name) -> Tensor:
        return self.params[name]


class LktModel(_Model):
    kind = "lkt"


class DktModel(_Model):
    kind = "dkt"


def _trunc_normal(rng, shape, std=0.02):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def _param_shapes(config):
    if isinstance(config, LktConfig):
        d, ff, v = config.d_model, config.d_ff, config.vocab_size
        shapes = [("tok_emb", (v, d)), ("pos_emb", (config.max_len, d))]
        for i in range(config.num_layers):
            p = f"layer{i}."
            shapes += [(p + "ln1.gain", (d,)), (p + "ln1.bias", (d,))]
            for w in ("q", "k", "v", "o"):
                shapes += [(p + f"w{w}", (d, d)), (p + f"b{w}", (d,))]
            shapes += [(p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
                       (p + "ff1.w", (d, ff)), (p + "ff1.b", (ff,)),
                       (p + "ff2.w", (ff, d)), (p + "ff2.b", (d,))]
        shapes += [("ln_f.gain", (d,)), ("ln_f.bias", (d,)),
                   ("resp.w", (d, 1)), ("resp.b", (1,)),
                   ("mlm.w", (d, v)), ("mlm.b", (v,))]
        return shapes
    h, q = config.hidden, config.num_questions
    return [("w_ih", (2 * q, 4 * h)), ("w_hh", (h, 4 * h)), ("b", (4 * h,)),
            ("w_out", (h, q)), ("b_out", (q,))]


def init_parameters(config, seed: int = 0):
    """Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = nx.default_dtype()
    params = OrderedDict()
    for name, shape in _param_shapes(config):
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif len(shape) == 1:
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name, dtype=dtype)
    cls = LktModel if isinstance(config, LktConfig) else DktModel
    return cls(config, params)


# -- LKT forward ------------------------------------------------------------------

@dataclass
class ForwardOutput:
    token_ids: np.ndarray
    hidden: Tensor
    attentions: list = field(default_factory=list)
    model: LktModel | None = None

    @property
    def logits(self) -> Tensor:
        """Per-position head logits: [B, L] for the response head, [B, L, V] for MLM."""
        m = self.model
        if m.config.head_type == "mlm":
            return nx.add(nx.matmul(self.hidden, m["mlm.w"]), m["mlm.b"])
        b, l, _ = self.hidden.shape
        return nx.reshape(nx.add(nx.matmul(self.hidden, m["resp.w"]), m["resp.b"]), (b, l))


def pad_batch(seqs: Sequence[np.ndarray]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def alibi_slopes(num_heads: int) -> np.ndarray:
    """Slopes 1/2, 1/8, 1/32, ... with the last head left global (slope 0)."""
    slopes = 2.0 ** -(2 * np.arange(num_heads) + 1.0)
    slopes[-1] = 0.0
    return slopes


def attention_bias(config: LktConfig, length: int) -> np.ndarray:
    """Additive [H, L, L] logit bias, ``-slope_h * |i - j|``."""
    if config.attention_bias == "none":
        return np.zeros((config.num_heads, length, length))
    dist = np.abs(np.arange(length)[None, :] - np.arange(length)[:, None])
    return -alibi_slopes(config.num_heads)[:, None, None] * dist[None]


def lkt_forward(model: LktModel, token_ids, training: bool = False, rng=None,
                keep_attention: bool = False) -> ForwardOutput:
    """Pre-norm transformer encoder over a padded id batch [B, L]."""
    cfg = model.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    bsz, length = ids.shape
    if length > cfg.max_len:
        raise ValueError(f"sequence length {length} exceeds max_len {cfg.max_len}")
    d, heads = cfg.d_model, cfg.num_heads
    dh = d // heads
    p = cfg.dropout_p
    dtype = model["tok_emb"].data.dtype

    key_mask = np.where(ids == PAD, -np.inf, 0.0)[:, None, None, :]
    key_mask = (key_mask + attention_bias(cfg, length)[None]).astype(dtype)
    positions = np.broadcast_to(np.arange(length), (bsz, length))
    x = nx.add(nx.embedding_lookup(model["tok_emb"], ids),
               nx.embedding_lookup(model["pos_emb"], positions))
    x = nx.dropout(x, p, rng, training)
    attentions = []
    inv_sqrt = 1.0 / math.sqrt(dh)

    def heads_first(t):
        return nx.permute(nx.reshape(t, (bsz, length, heads, dh)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        h = nx.layer_norm(x, model[pre + "ln1.gain"], model[pre + "ln1.bias"])
        q = heads_first(nx.scale(nx.add(nx.matmul(h, model[pre + "wq"]), model[pre + "bq"]), inv_sqrt))
        k = heads_first(nx.add(nx.matmul(h, model[pre + "wk"]), model[pre + "bk"]))
        v = heads_first(nx.add(nx.matmul(h, model[pre + "wv"]), model[pre + "bv"]))
        att = nx.softmax_rows(nx.matmul(q, nx.permute(k, (0, 1, 3, 2))), key_mask)
        if keep_attention:
            attentions.append(att.data.copy())
        ctx = nx.reshape(nx.permute(nx.matmul(att, v), (0, 2, 1, 3)), (bsz, length, d))
        out = nx.add(nx.matmul(ctx, model[pre + "wo"]), model[pre + "bo"])
        x = nx.add(x, nx.dropout(out, p, rng, training))
        h = nx.layer_norm(x, model[pre + "ln2.gain"], model[pre + "ln2.bias"])
        ff = nx.gelu(nx.add(nx.matmul(h, model[pre + "ff1.w"]), model[pre + "ff1.b"]))
        ff = nx.add(nx.matmul(ff, model[pre + "ff2.w"]), model[pre + "ff2.b"])
        x = nx.add(x, nx.dropout(ff, p, rng, training))
    hidden = nx.layer_norm(x, model["ln_f.gain"], model["ln_f.bias"])
    return ForwardOutput(ids, hidden, attentions, model)


def predict_masked_correctness(output: ForwardOutput, batch_index, positions) -> Tensor:
    """Correctness probability at each ``(batch_index, position)``; each must hold [MASK]."""
    batch_index = np.asarray(batch_index, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.int64)
    held = output.token_ids[batch_index, positions]
    if np.any(held != MASK):
        bad = int(positions[np.flatnonzero(held != MASK)[0]])
        raise ValueError(f"position {bad} does not hold the [MASK] token")
    m = output.model
    h = nx.take_rows(output.hidden, (batch_index, positions))
    logit = nx.add(nx.matmul(h, m["resp.w"]), m["resp.b"])
    return nx.sigmoid(nx.reshape(logit, (len(positions),)))


def lkt_loss(probs: Tensor, labels, denominator: int | None = None) -> Tensor:
    return nx.bce_loss(probs, labels, denominator)


def lkt_batch_loss(model: LktModel, examples: Sequence[LktExample], training=False, rng=None,
                   denominator=None) -> tuple[Tensor, Tensor]:
    """Forward a batch of masked examples; returns ``(loss, probabilities)``."""
    ids = pad_batch([e.token_ids for e in examples])
    out = lkt_forward(model, ids, training=training, rng=rng)
    bidx = np.concatenate([np.full(len(e.mask_positions), i) for i, e in enumerate(examples)])
    pos = np.concatenate([e.mask_positions for e in examples])
    labels = np.concatenate([e.labels for e in examples])
    probs = predict_masked_correctness(out, bidx, pos)
    return lkt_loss(probs, labels, denominator), probs


def mlm_mask(token_ids, rng, rate=0.15, vocab_size=None):
    """BERT-style corruption of ordinary tokens: 80% [MASK], 10% random, 10% kept.

    Returns ``(corrupted_ids, positions, targets)``; at least one position.
    """
    ids = np.asarray(token_ids, dtype=np.int64).copy()
    n_special = len(SPECIAL_TOKENS)
    candidates = np.flatnonzero(ids >= n_special)
    if len(candidates) == 0:
        raise ValueError("no maskable tokens")
    chosen = candidates[rng.random(len(candidates)) < rate]
    if len(chosen) == 0:
        chosen = candidates[[rng.integers(len(candidates))]]
    targets = ids[chosen].copy()
    roll = rng.random(len(chosen))
    ids[chosen[roll < 0.8]] = MASK
    rand_pos = chosen[(roll >= 0.8) & (roll < 0.9)]
    if vocab_size is not None and vocab_size > n_special:
        ids[rand_pos] = rng.integers(n_special, vocab_size, size=len(rand_pos))
    return ids, chosen, targets


def mlm_forward_loss(model: LktModel, token_ids, positions, targets, training=False, rng=None,
                     denominator=None) -> Tensor:
    """Vocabulary cross-entropy at corrupted positions.

    ``token_ids`` is a padded batch [B, L]; ``positions`` a pair
    ``(batch_index, position)`` of flat arrays aligned with ``targets``.
    """
    bidx, pos = (np.asarray(a, dtype=np.int64) for a in positions)
    if len(pos) == 0:
        raise ValueError("no masked positions")
    out = lkt_forward(model, token_ids, training=training, rng=rng)
    h = nx.take_rows(out.hidden, (bidx, pos))
    logits = nx.add(nx.matmul(h, model["mlm.w"]), model["mlm.b"])
    return nx.cross_entropy(logits, targets, denominator)


def lkt_predict(model: LktModel, sequences: Sequence[LktSequence], batch_size: int = 64):
    """Score every interaction with only its own response masked.

    Returns ``(scores, labels, owners)`` where ``owners[i]`` is the index of the
    sequence the i-th prediction came from.
    """
    scores, labels, owners = [], [], []
    pending = []

    def flush():
        if not pending:
            return
        probs = lkt_batch_loss(model, [e for e, _ in pending])[1].data
        scores.append(probs)
        labels.append(np.concatenate([e.labels for e, _ in pending]))
        owners.append(np.asarray([o for _, o in pending]))
        pending.clear()

    for si, seq in enumerate(sequences):
        for j in range(seq.interaction_count):
            pending.append((mask_targets(seq, [j]), si))
            if len(pending) >= batch_size:
                flush()
    flush()
    if not scores:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(scores).astype(np.float64), np.concatenate(labels), np.concatenate(owners)


# -- DKT --------------------------------------------------------------------------

def _dkt_inputs(examples: Sequence[DktExample]):
    steps = max(len(e.responses) for e in examples)
    if steps == 0:
        raise ValueError("empty DKT sequence")
    inp = np.full((len(examples), steps), SENTINEL, dtype=np.int64)
    q = np.full((len(examples), steps), SENTINEL, dtype=np.int64)
    r = np.zeros((len(examples), steps), dtype=np.int64)
    valid = np.zeros((len(examples), steps), dtype=bool)
    for i, e in enumerate(examples):
        if len(e.responses) == 0:
            raise ValueError("empty DKT sequence")
        n = len(e.responses)
        inp[i, :n] = e.input_indices
        q[i, :n] = e.question_indices
        r[i, :n] = e.responses
        valid[i, :n] = True
    return inp, q, r, valid


def dkt_forward(model: DktModel, examples: Sequence[DktExample] | DktExample) -> Tensor:
    """Per-step probabilities over all questions, [B, T, Q].

    The prediction at step t is computed from inputs of steps < t only;
    sentinel steps leave the recurrent state unchanged.
    """
    if isinstance(examples, DktExample):
        examples = [examples]
    return nx.sigmoid(_dkt_logits(model, _dkt_inputs(examples)[0]))


def _dkt_logits(model: DktModel, inp: np.ndarray) -> Tensor:
    bsz, steps = inp.shape
    hsz = model.config.hidden
    dtype = model["w_hh"].data.dtype
    known = (inp != SENTINEL)
    h = Tensor(np.zeros((bsz, hsz), dtype=dtype), dtype=dtype)
    c = Tensor(np.zeros((bsz, hsz), dtype=dtype), dtype=dtype)
    states = []
    for t in range(steps):
        states.append(h)
        if t == steps - 1:
            break
        x = nx.embedding_lookup(model["w_ih"], np.where(known[:, t], inp[:, t], 0))
        z = nx.add(nx.add(x, nx.matmul(h, model["w_hh"])), model["b"])
        i_g = nx.sigmoid(nx.slice_last(z, 0, hsz))
        f_g = nx.sigmoid(nx.slice_last(z, hsz, 2 * hsz))
        g_g = nx.tanh(nx.slice_last(z, 2 * hsz, 3 * hsz))
        o_g = nx.sigmoid(nx.slice_last(z, 3 * hsz, 4 * hsz))
        c_new = nx.add(nx.mul(f_g, c), nx.mul(i_g, g_g))
        h_new = nx.mul(o_g, nx.tanh(c_new))
        if known[:, t].all():
            h, c = h_new, c_new
        else:
            # sentinel steps carry no information: the state passes through unchanged
            keep = known[:, t, None].astype(dtype)
            upd = Tensor(np.broadcast_to(keep, (bsz, hsz)), dtype=dtype)
            hold = Tensor(np.broadcast_to(1.0 - keep, (bsz, hsz)), dtype=dtype)
            h = nx.add(nx.mul(h_new, upd), nx.mul(h, hold))
            c = nx.add(nx.mul(c_new, upd), nx.mul(c, hold))
    hs = nx.stack(states, axis=1)
    return nx.add(nx.matmul(hs, model["w_out"]), model["b_out"])


def dkt_prior(model: DktModel) -> float:
    """Constant prediction for questions the model has never seen."""
    b = model["b_out"].data.astype(np.float64)
    return float(1.0 / (1.0 + np.exp(-b.mean())))


def dkt_batch_loss(model: DktModel, examples: Sequence[DktExample], denominator=None):
    """BCE over every known-question step; returns ``(loss, probs)``."""
    inp, q, r, valid = _dkt_inputs(examples)
    target = valid & (q != SENTINEL)
    bi, ti = np.nonzero(target)
    if len(bi) == 0:
        raise ValueError("no known-question targets in batch")
    logits = _dkt_logits(model, inp)
    picked = nx.take_rows(logits, (bi, ti, q[bi, ti]))
    probs = nx.sigmoid(picked)
    return nx.bce_loss(probs, r[bi, ti], denominator), probs


def dkt_predict(model: DktModel, examples: Sequence[DktExample], batch_size: int = 64):
    """Scores for every step; unseen questions get :func:`dkt_prior`.

    Returns ``(scores, labels, owners)`` like :func:`lkt_predict`.
    """
    scores, labels, owners = [], [], []
    prior = dkt_prior(model)
    for start in range(0, len(examples), batch_size):
        chunk = examples[start: start + batch_size]
        inp, q, r, valid = _dkt_inputs(chunk)
        logits = _dkt_logits(model, inp).data.astype(np.float64)
        bi, ti = np.nonzero(valid)
        qq = q[bi, ti]
        z = logits[bi, ti, np.where(qq == SENTINEL, 0, qq)]
        s = np.where(qq == SENTINEL, prior, 1.0 / (1.0 + np.exp(-z)))
        scores.append(s)
        labels.append(r[bi, ti])
        owners.append(bi + start)
    return np.concatenate(scores), np.concatenate(labels), np.concatenate(owners)


# -- checkpoints ------------------------------------------------------------------

_MAGIC = "# lkt checkpoint v1"


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def save_checkpoint(model, path) -> None:
    """Text manifest (config + tensor table) followed by little-endian float32 blobs."""
    lines = [_MAGIC, "[config]", f"kind = {model.kind}"]
    for f in dataclasses.fields(model.config):
        lines.append(f"{f.name} = {_fmt(getattr(model.config, f.name))}")
    lines.append("[tensors]")
    blobs = []
    for name, t in model.params.items():
        lines.append(f"{name} float32 {','.join(str(n) for n in t.shape)}")
        blobs.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    lines.append("[data]")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    marker = b"\n[data]\n"
    cut = raw.find(marker)
    if not raw.startswith(_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not an lkt checkpoint")
    header = raw[:cut].decode("utf-8").split("\n")
    payload = raw[cut + len(marker):]
    section, conf, table = None, {}, []
    for line in header[1:]:
        if line in ("[config]", "[tensors]"):
            section = line
        elif section == "[config]":
            key, _, val = line.partition(" = ")
            conf[key] = val
        elif section == "[tensors]":
            name, dtype, shape = line.split(" ")
            if dtype != "float32":
                raise ValueError(f"{path}: unsupported dtype {dtype} for {name}")
            table.append((name, tuple(int(s) for s in shape.split(","))))
    expected = sum(4 * int(np.prod(s)) for _, s in table)
    if expected != len(payload):
        raise ValueError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    kind = conf.pop("kind", None)
    cls_cfg = {"lkt": LktConfig, "dkt": DktConfig}.get(kind)
    if cls_cfg is None:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    kwargs = {}
    for f in dataclasses.fields(cls_cfg):
        if f.name in conf:
            typ = type(f.default) if f.default is not dataclasses.MISSING else int
            kwargs[f.name] = typ(conf[f.name])
    config = cls_cfg(**kwargs)
    params = OrderedDict()
    offset = 0
    dtype = nx.default_dtype()
    for name, shape in table:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name, dtype=dtype)
    model = (LktModel if kind == "lkt" else DktModel)(config, params)
    expected_names = [n for n, _ in _param_shapes(config)]
    if list(params) != expected_names:
        raise ValueError(f"{path}: tensor table does not match the {kind} config")
    return model
