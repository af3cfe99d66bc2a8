"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside of any tape every op simply
evaluates, which is how inference and finite-difference probes run.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4., 6.])
"""

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, require

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


@dataclass
class Record:
    name: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable


class Tape:
    """Ordered log of differentiable operations.

    Records are appended as ops execute, so inputs always precede the ops
    consuming them. Use as a context manager to make it the active tape of
    the current thread.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, name, inputs, output, backward_fn):
        self.records.append(Record(name, tuple(inputs), output, backward_fn))

    def count(self, name):
        return sum(1 for r in self.records if r.name == name)

    def __len__(self):
        return len(self.records)


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape
    that requires a gradient."""
    require(loss.size == 1, f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, inputs, backward_fn, name):
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def exp(x):
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x):
    mask = x.data > 0
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softplus(x):
    """log(1 + exp(x)), evaluated without overflow."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * d))
    return _emit(out, (x,), lambda g: (g * sig,), "softplus")


# shape ---------------------------------------------------------------------

def reshape(x, shape):
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x, idx):
    def bw(g):
        dx = np.zeros_like(x.data)
        if _is_basic_index(idx):
            dx[idx] = g
        else:
            np.add.at(dx, idx, g)
        return (dx,)

    return _emit(x.data[idx], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# reductions ----------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims=False):
    return _emit(
        x.data.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (np.array(_expand(g, x.shape, axis, keepdims)),),
        "sum",
    )


def mean(x, axis=None, keepdims=False):
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.size // max(out.size, 1)
    return _emit(out, (x,), lambda g: (np.array(_expand(g, x.shape, axis, keepdims)) / n,), "mean")


def global_avg_pool(x):
    """[B,C,H,W] -> [B,C]."""
    require(x.ndim == 4, f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    """Matrix product over the last two axes; leading axes must agree."""
    a, b = as_tensor(a), as_tensor(b)
    require(a.ndim >= 2 and b.ndim >= 2, "matmul needs at least 2-D operands")
    require(
        a.shape[-1] == b.shape[-2] and a.shape[:-2] == b.shape[:-2],
        f"matmul shape mismatch {a.shape} @ {b.shape}",
    )

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit(a.data @ b.data, (a, b), bw, "matmul")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), bw, "softmax")


def masked_softmax(x, mask):
    """Softmax along the last axis restricted to entries where ``mask`` is
    true; masked-out entries come back as exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    require(mask.shape == x.shape, "mask shape must match input")
    require(bool(mask.any(axis=-1).all()), "every row needs at least one unmasked entry")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), bw, "masked_softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), bw, "log_softmax")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    require(logits.ndim == 2, f"cross_entropy expects [B,P] logits, got {logits.shape}")
    b, p = logits.shape
    require(labels.shape == (b,), "one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= p):
        raise ContractViolation(f"labels must lie in [0,{p})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / b,)

    return _emit(np.array(loss), (logits,), bw, "cross_entropy")


# distances -----------------------------------------------------------------

def l2_distance(a, b):
    """Row-wise Euclidean norm of a - b; subgradient 0 where rows coincide."""
    require(a.shape == b.shape and a.ndim == 2, f"l2_distance shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = np.sqrt((diff * diff).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        d = np.where(n[:, None] > 0, diff / safe[:, None], 0.0) * g[:, None]
        return d, -d

    return _emit(n, (a, b), bw, "l2_distance")


def pairwise_distance(x):
    """[M,D] -> [M,M] Euclidean distance matrix."""
    require(x.ndim == 2, "pairwise_distance expects [M,D]")
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    inv = np.where(dist > 0, 1.0 / np.where(dist > 0, dist, 1.0), 0.0)

    def bw(g):
        w = g * inv
        w = w + w.T
        return (np.einsum("ij,ijd->id", w, diff),)

    return _emit(dist, (x,), bw, "pairwise_distance")


# normalization -------------------------------------------------------------

class RunningStats:
    """Batch-norm running mean/variance buffers."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm(x, gamma, beta, training, stats: RunningStats, momentum=0.1, eps=1e-5):
    """Per-channel normalization of [B,C] or [B,C,H,W] input.

    Training mode normalizes with biased batch statistics and folds the
    unbiased variance into ``stats``; eval mode uses ``stats`` only.
    """
    require(x.ndim in (2, 4), f"batch_norm expects [B,C] or [B,C,H,W], got {x.shape}")
    c = x.shape[1]
    require(gamma.shape == (c,) and beta.shape == (c,), "gamma/beta must be [C]")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    m = x.size // c
    if training:
        require(x.shape[0] >= 2, "batch_norm in train mode needs B >= 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        stats.var = (1 - momentum) * stats.var + momentum * var * m / max(m - 1, 1)
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    return _emit(out, (x, gamma, beta), bw, "batch_norm")


# convolution ---------------------------------------------------------------

def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, kernel, stride=1, padding=0, tag=None):
    """2-D cross-correlation of [B,C_in,H,W] with [C_out,C_in,k,k].

    out[b,o,i,j] = sum_{c,m,n} in[b,c,i*s+m-p, j*s+n-p] * kernel[o,c,m,n],
    zero outside the input. ``tag`` names the tape record (default "conv2d"),
    which lets callers count specific convolutions.
    """
    require(x.ndim == 4 and kernel.ndim == 4, "conv2d expects 4-D input and kernel")
    b, cin, h, w = x.shape
    cout, kc, k, k2 = kernel.shape
    require(k == k2 and k in (1, 3), f"kernel must be 1x1 or 3x3, got {k}x{k2}")
    require(stride in (1, 2), f"stride must be 1 or 2, got {stride}")
    require(kc == cin, f"kernel expects {kc} input channels, input has {cin}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    require(ho >= 1 and wo >= 1, "convolution output would be empty")

    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    # cols[b, i, j, c, m, n] = xp[b, c, i*s+m, j*s+n]
    cols = np.empty((b, ho, wo, cin, k, k))
    for m in range(k):
        for n in range(k):
            win = xp[:, :, m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s]
            cols[:, :, :, :, m, n] = win.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(b * ho * wo, cin * k * k)
    wmat = kernel.data.reshape(cout, cin * k * k)
    out = (cols2 @ wmat.T).reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dk = (gm.T @ cols2).reshape(kernel.shape)
        dcols = (gm @ wmat).reshape(b, ho, wo, cin, k, k)
        dxp = np.zeros_like(xp)
        for m in range(k):
            for n in range(k):
                dxp[:, :, m : m + s * (ho - 1) + 1 : s, n : n + s * (wo - 1) + 1 : s] += dcols[
                    :, :, :, :, m, n
                ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return dx, dk

    return _emit(np.ascontiguousarray(out), (x, kernel), bw, tag or "conv2d")


def conv3x3_as_pointwise_sum(x, kernel, padding=1):
    """Stride-1 3x3 convolution evaluated as nine shifted 1x1 convolutions,
    one per kernel position."""
    xd = as_tensor(x).data
    k = as_tensor(kernel).data
    require(k.shape[2:] == (3, 3), "expected a 3x3 kernel")
    _, _, h, w = xd.shape
    ho, wo = conv_output_size(h, 3, 1, padding), conv_output_size(w, 3, 1, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((xd.shape[0], k.shape[0], ho, wo))
    for m in range(3):
        for n in range(3):
            shifted = Tensor(xp[:, :, m : m + ho, n : n + wo])
            out += conv2d(shifted, Tensor(k[:, :, m : m + 1, n : n + 1])).data
    return out
