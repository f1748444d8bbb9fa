"""Dense-tensor numerics with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 under
``precision("float64")`` for tighter gradient checks). Differentiable
primitives record pull-back closures onto the thread's active
:class:`Tape`; with no tape open they act as plain numpy wrappers,
which is what inference paths use.

A tape is built fresh for each forward pass and may run backward once.
Tapes and the tensors recorded on them are confined to a single thread;
independent tapes on independent threads are fine.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_STATE = threading.local()

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MASKED_LOGIT = -1e30  # exp() underflows to exactly 0 in both float widths


def default_dtype():
    return getattr(_STATE, "dtype", np.float32)


@contextmanager
def precision(name: str):
    """Temporarily switch the default float width ("float32" or "float64")."""
    if name not in ("float32", "float64"):
        raise ValueError(f"unknown precision {name!r}")
    previous = getattr(_STATE, "dtype", np.float32)
    _STATE.dtype = np.float32 if name == "float32" else np.float64
    try:
        yield
    finally:
        _STATE.dtype = previous


def _active_tape():
    return getattr(_STATE, "tape", None)


class Tensor:
    """N-dimensional float array, optionally tracked on the active tape.

    ``requires_grad`` marks trainable leaves; intermediates produced while
    a tape is open are tracked automatically. ``grad`` is populated (as a
    plain ndarray of the same shape) by :meth:`Tape.backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype())
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Recorded primitive applications, in execution order.

    Reverse iteration over the records visits every node after all of its
    consumers, so one linear sweep implements backpropagation. A tape is
    consumed by a single backward pass and then discarded.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_STATE, "tape", None)
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Tensor, pulls):
        out._tape = self
        out._node = len(self._nodes)
        self._nodes.append((out, pulls))

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Leaves with ``requires_grad=False`` stay grad-free.
        """
        if self._consumed:
            raise RuntimeError("tape already used for a backward pass")
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss tensor does not belong to this tape")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for out, pulls in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            for t, pull in pulls:
                if t._tape is not self and not t.requires_grad:
                    continue
                contribution = pull(g)
                if t.grad is None:
                    t.grad = contribution
                else:
                    t.grad = t.grad + contribution


def _make(out_data: np.ndarray, pulls) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    tape = _active_tape()
    if tape is not None:
        tape.record(out, pulls)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _sum_to_trailing(g: np.ndarray, shape) -> np.ndarray:
    # collapse leading axes so g matches a trailing-dim (bias-style) operand
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. The only broadcast allowed is a trailing-dim vector."""
    if a.shape != b.shape:
        if not (b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]):
            raise ShapeError(f"add: {a.shape} vs {b.shape}")
        return _make(a.data + b.data, [(a, lambda g: g),
                                       (b, lambda g: _sum_to_trailing(g, b.shape))])
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, [(a, lambda g: g * s)])


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Non-overlapping-window convolution: kernel size equals the stride.

    ``x`` is (C_in, H, W), ``weight`` is (C_in, K, K, C_out) with K == stride,
    ``bias`` is (C_out,). Output is (C_out, H/K, W/K).
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape}, kernel {weight.shape}")
    c_in, h, w = x.shape
    kc, k1, k2, c_out = weight.shape
    if k1 != stride or k2 != stride:
        raise ShapeError(f"conv2d: kernel {weight.shape} must match stride {stride}")
    if kc != c_in:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    if h % stride or w % stride:
        raise ShapeError(f"conv2d: spatial dims {(h, w)} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride
    n = ho * wo
    cols = (x.data.reshape(c_in, ho, stride, wo, stride)
            .transpose(1, 3, 0, 2, 4)
            .reshape(n, c_in * stride * stride))
    wmat = weight.data.reshape(c_in * stride * stride, c_out)
    out = (cols @ wmat + bias.data).reshape(ho, wo, c_out).transpose(2, 0, 1)

    def pull_x(g):
        gn = g.transpose(1, 2, 0).reshape(n, c_out)
        dcols = gn @ wmat.T
        return (dcols.reshape(ho, wo, c_in, stride, stride)
                .transpose(2, 0, 3, 1, 4)
                .reshape(c_in, h, w))

    def pull_w(g):
        gn = g.transpose(1, 2, 0).reshape(n, c_out)
        return (cols.T @ gn).reshape(c_in, stride, stride, c_out)

    def pull_b(g):
        return g.reshape(c_out, n).sum(axis=1)

    return _make(out, [(x, pull_x), (weight, pull_w), (bias, pull_b)])


# ---------------------------------------------------------------------------
# normalization and activations


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero mean / unit variance over the last dimension, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature dim {d}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def pull_x(g):
        gg = g * gain.data
        return inv * (gg - gg.mean(axis=-1, keepdims=True)
                      - xhat * (gg * xhat).mean(axis=-1, keepdims=True))

    leading = tuple(range(x.ndim - 1))
    return _make(out, [
        (x, pull_x),
        (gain, lambda g: (g * xhat).sum(axis=leading)),
        (bias, lambda g: g.sum(axis=leading)),
    ])


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def pull(g):
        return g * (phi + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI)

    return _make(out.astype(xd.dtype, copy=False), [(x, pull)])


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(s, [(x, lambda g: g * s * (1.0 - s))])


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), [(x, lambda g: g / xd)])


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where no clamping occurred."""
    xd = x.data
    inside = ((xd > lo) & (xd < hi)).astype(xd.dtype)
    return _make(np.clip(xd, lo, hi), [(x, lambda g: g * inside)])


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension, max-subtracted for stability."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def pull(g):
        return p * (g - (g * p).sum(axis=-1, keepdims=True))

    return _make(p, [(x, pull)])


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.shape
    return _make(x.data.reshape(shape), [(x, lambda g: g.reshape(orig))])


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), [(x, lambda g: g.transpose(inverse))])


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=axis)

    def make_pull(i):
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return pull

    return _make(out, [(p, make_pull(i)) for i, p in enumerate(parts)])


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]

    def pull(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[start:stop] = g
        return full

    del n
    return _make(x.data[start:stop].copy(), [(x, pull)])


def take_rows(x: Tensor, indices) -> Tensor:
    """Row gather on axis 0; the gradient scatter-adds into the source.

    With a 2-D embedding table and integer token ids this is exactly an
    embedding lookup.
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows: indices must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: index out of range for {x.shape[0]} rows")

    def pull(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return full

    return _make(x.data[idx], [(x, pull)])


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        return _make(np.asarray(x.data.sum()),
                     [(x, lambda g: np.broadcast_to(g, x.shape).astype(g.dtype))])
    out = x.data.sum(axis=axis)

    def pull(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(g.dtype)

    return _make(out, [(x, pull)])


def tmean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        k = x.size
        return _make(np.asarray(x.data.mean()),
                     [(x, lambda g: np.broadcast_to(g / k, x.shape).astype(g.dtype))])
    k = x.shape[axis]
    out = x.data.mean(axis=axis)

    def pull(g):
        return np.broadcast_to(np.expand_dims(g / k, axis), x.shape).astype(g.dtype)

    return _make(out, [(x, pull)])


# ---------------------------------------------------------------------------
# attention


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              mask: np.ndarray | None = None, need_weights: bool = False):
    """Multi-head scaled dot-product attention.

    ``q`` is (n_q, D); ``k`` and ``v`` are (n_kv, D); D must divide evenly
    into ``heads``. ``mask`` is an optional boolean (n_q, n_kv) array where
    True marks key positions a query must not attend to (their logits are
    driven to -inf before the softmax). Returns (n_q, D); with
    ``need_weights`` also returns the (heads, n_q, n_kv) weight array as a
    plain ndarray for inspection.
    """
    nq, d = q.shape
    nkv, dk = k.shape
    if dk != d or v.shape != (nkv, d):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if d % heads:
        raise ShapeError(f"attention: {heads} heads do not divide width {d}")
    if mask is not None and mask.shape != (nq, nkv):
        raise ShapeError(f"attention: mask {mask.shape} vs scores {(nq, nkv)}")
    dh = d // heads
    inv_sqrt = 1.0 / math.sqrt(dh)

    qh = q.data.reshape(nq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nkv, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nkv, heads, dh).transpose(1, 0, 2)

    scores = np.matmul(qh, kh.transpose(0, 2, 1)) * inv_sqrt
    if mask is not None:
        scores = np.where(mask[None, :, :], scores.dtype.type(_MASKED_LOGIT), scores)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, vh).transpose(1, 0, 2).reshape(nq, d)

    def split_heads_grad(g):
        return g.reshape(nq, heads, dh).transpose(1, 0, 2)

    def pull_q(g):
        gh = split_heads_grad(g)
        dattn = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dqh = np.matmul(ds, kh) * inv_sqrt
        return dqh.transpose(1, 0, 2).reshape(nq, d)

    def pull_k(g):
        gh = split_heads_grad(g)
        dattn = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
        dkh = np.matmul(ds.transpose(0, 2, 1), qh) * inv_sqrt
        return dkh.transpose(1, 0, 2).reshape(nkv, d)

    def pull_v(g):
        gh = split_heads_grad(g)
        dvh = np.matmul(attn.transpose(0, 2, 1), gh)
        return dvh.transpose(1, 0, 2).reshape(nkv, d)

    result = _make(out, [(q, pull_q), (k, pull_k), (v, pull_v)])
    if need_weights:
        return result, attn
    return result


# ---------------------------------------------------------------------------
# resampling and losses


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of a (C, H, W) map."""
    if x.ndim != 3:
        raise ShapeError(f"upsample2x: expected (C, H, W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def pull(g):
        return g.reshape(c, h, 2, w, 2).sum(axis=(2, 4))

    return _make(out, [(x, pull)])


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Per-element smooth L1: 0.5*d^2 for |d| < 1, else |d| - 0.5."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    absd = np.abs(d)
    out = np.where(absd < 1.0, 0.5 * d * d, absd - 0.5)
    ddiff = np.clip(d, -1.0, 1.0)  # derivative of both branches wrt d

    return _make(out.astype(d.dtype, copy=False),
                 [(pred, lambda g: g * ddiff), (target, lambda g: -g * ddiff)])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (n, V) logits against integer labels (n,)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n, v = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= v):
        raise ValueError(f"cross_entropy: label outside [0, {v})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def pull(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return g * p / n

    return _make(np.asarray(loss, dtype=logits.data.dtype), [(logits, pull)])
