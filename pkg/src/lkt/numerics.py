"""Dense tensors with a small reverse-mode autodiff tape.

Operations are plain functions over :class:`Tensor`. When a :class:`Tape` is
active (``with Tape() as tape:``) and any input requires a gradient, the
operation appends a record holding its inputs and a backward rule. Outside a
tape nothing is recorded, which is how inference runs.

Broadcasting is deliberately limited: elementwise binary ops accept either
identical shapes or a right operand whose shape equals the trailing dim of the
left one (bias / gain). Batched ``matmul`` is the only other exception.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float32
_TAPES: list["Tape"] = []

BCE_EPS = 1e-7
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (e.g. float64 for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_is_leaf")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so inputs always precede the
    operations that consume them.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.records)


def _current_tape():
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._is_leaf = False
    out.requires_grad = False
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _reduce_to(grad, shape):
    # Sum out the dims that were broadcast when the operand had `shape`.
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_binary(a, b, op):
    if a.shape == b.shape:
        return
    if len(b.shape) == 1 and a.shape[-1:] == b.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    return _emit(a.data + b.data, (a, b),
                 lambda g: (g, _reduce_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    return _emit(a.data - b.data, (a, b),
                 lambda g: (g, -_reduce_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (g * bd, _reduce_to(g * ad, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd
    t = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit(y, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    dtype = x.data.dtype
    keep = (rng.random(x.shape, dtype=dtype) >= p).astype(dtype)
    keep *= dtype.type(1.0 / (1.0 - p))
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# -- linear algebra / layout --------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two dims.

    ``b`` is either 2-D (shared weight) or carries the same leading batch dims
    as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop], (x,), backward)


def stack(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    data = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _emit(data, xs, backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.max()) if ids.max() >= vocab else int(ids.min())
        raise IndexError(f"embedding index {bad} out of vocabulary of size {vocab}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), backward)


def take_rows(x: Tensor, index: tuple) -> Tensor:
    """Advanced-index the leading dims of ``x`` (e.g. ``(batch_idx, pos_idx)``)."""
    index = tuple(np.asarray(i) for i in index)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _emit(x.data[index], (x,), backward)


# -- normalisation ------------------------------------------------------------

def softmax_rows(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last dim, stabilised by max-subtraction.

    ``additive_mask`` is a constant array broadcastable to ``x``: ``-inf``
    hides a key, finite values act as a fixed logit bias.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty dim")
    # one scratch buffer: these arrays are [B, H, L, L] in attention
    y = x.data - x.data.max(axis=-1, keepdims=True) if additive_mask is None else x.data + additive_mask
    if additive_mask is not None:
        y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def backward(g):
        out = g - (g * y).sum(axis=-1, keepdims=True)
        out *= y
        return (out,)

    return _emit(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat
                        - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gain.shape), _reduce_to(g, bias.shape)

    return _emit(y, (x, gain, bias), backward)


# -- reductions and losses ----------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(x.data.sum(keepdims=False).reshape(1), (x,),
                 lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def bce_loss(probs: Tensor, labels, denominator: int | None = None) -> Tensor:
    """Mean binary cross-entropy over ``probs``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``. ``denominator``
    overrides the averaging count, which gradient accumulation uses so that
    micro-batch losses sum to the full-batch mean.
    """
    labels = np.asarray(labels, dtype=probs.data.dtype).reshape(probs.shape)
    n = probs.data.size
    if n == 0:
        raise ValueError("no masked positions")
    denom = n if denominator is None else denominator
    p = probs.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = ((p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)).astype(p.dtype)
    terms = labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)
    loss = np.asarray([-terms.sum() / denom], dtype=p.dtype)

    def backward(g):
        d = -(labels / pc - (1.0 - labels) / (1.0 - pc)) / denom
        return (g.reshape(()) * d * inside,)

    return _emit(loss, (probs,), backward)


def cross_entropy(logits: Tensor, targets, denominator: int | None = None) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [n, V] against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        raise ValueError("no masked positions")
    denom = n if denominator is None else denominator
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = np.asarray([-logp[rows, targets].sum() / denom], dtype=logits.data.dtype)

    def backward(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (g.reshape(()) * d / denom,)

    return _emit(loss, (logits,), backward)


# -- backward -----------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Gradients add onto existing ``.grad`` values, so calling this twice
    without zeroing doubles them.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    end = None
    for i in range(len(tape.records) - 1, -1, -1):
        if tape.records[i].out is loss:
            end = i
            break
    if end is None:
        raise ValueError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records[: end + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                gi = np.asarray(gi, dtype=inp.data.dtype)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def numerical_grad(f: Callable[[], float], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function with respect to ``x.data``."""
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out
