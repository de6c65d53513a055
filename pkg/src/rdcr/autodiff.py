"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive records a :class:`TapeNode` on its output.
Nodes carry a monotone sequence number, so the set of nodes reachable from a
loss, sorted by that number, is a valid topological order (the "tape").

All numerics are float64.  Convolution is cross-correlation (no kernel flip).
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "TapeNode", "NonFiniteError", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "scale", "sum", "mean", "reshape", "take", "concat",
    "conv2d", "linear", "relu", "dropout", "max_pool2d", "global_average_pool",
    "softmax", "log_softmax", "cross_entropy", "mse_consistency",
    "kl_consistency", "backward", "zero_grad", "gradient_check",
]

_seq = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf reaches a checked primitive."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)

    def __repr__(self):
        return f"TapeNode({self.op!r}, seq={self.seq})"


class Tensor:
    """float64 n-d array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what} of shape {self.shape}")
        return self

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    t = Tensor(out)
    if _grad_enabled and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, tuple(inputs), backward_fn)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, "add", (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, "sub", (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, "scale", (x,), lambda g: (g * c,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def take(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], "take", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _record(out, "relu", (x,), lambda g: (np.where(out > 0, g, 0.0),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the caller decides when it is active."""
    if p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _record(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# layers

CHUNK_FLOATS = 40_000  # patch-matrix block kept cache resident


def _chunk(per_image: int) -> int:
    return max(1, CHUNK_FLOATS // max(per_image, 1))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input and OCkHkW weight."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    x.check_finite("conv2d input")
    weight.check_finite("conv2d weight")

    # Channels-last im2col, processed a few images at a time so each patch
    # block stays in cache between the gather and the matmul.
    xh = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.zeros((n, hp, wp, c))
        xp[:, padding:padding + h, padding:padding + w, :] = xh
    else:
        xp = xh
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    step = _chunk(ho * wo * kh * kw * max(c, o))
    out = np.empty((n, ho, wo, o))
    for s in range(0, n, step):
        cols = win[s:s + step].transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)
        np.matmul(cols, wmat, out=out[s:s + step].reshape(-1, o))
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    need_gx = x.requires_grad
    # stride 1: the input gradient is a full correlation of g with the flipped kernel
    as_corr = stride == 1 and padding < min(kh, kw)

    def bw(g):
        gh = g.transpose(0, 2, 3, 1)
        gw = np.zeros((o, kh * kw * c))
        for s in range(0, n, step):
            cols = win[s:s + step].transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * c)
            gw += gh[s:s + step].reshape(-1, o).T @ cols
        gw = gw.reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if need_gx and as_corr:
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.zeros((n, ho + 2 * ph, wo + 2 * pw, o))
            gp[:, ph:ph + ho, pw:pw + wo, :] = gh
            gwin = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            wflip = wmat.reshape(kh, kw, c, o)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(kh * kw * o, c)
            dx = np.empty((n, h, w, c))
            for s in range(0, n, step):
                gcols = gwin[s:s + step].transpose(0, 1, 2, 4, 5, 3).reshape(-1, kh * kw * o)
                np.matmul(gcols, wflip, out=dx[s:s + step].reshape(-1, c))
            gx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
        elif need_gx:
            gm = gh.reshape(-1, o)
            dxp = np.zeros((n, hp, wp, c))
            wk = wmat.reshape(kh, kw, c, o)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += \
                        (gm @ wk[i, j].T).reshape(n, ho, wo, c)
            gx = dxp[:, padding:padding + h, padding:padding + w, :] if padding else dxp
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, np.ascontiguousarray(gw), gb) if bias is not None else (gx, np.ascontiguousarray(gw))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, "conv2d", inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight stored as (D, M)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = (g @ wd.T, xd.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, "linear", inputs, bw)


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by ``kernel``."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {kernel}")
    ho, wo = h // kernel, w // kernel
    blocks = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, kernel * kernel)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, kernel * kernel))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
        return (gb.reshape(n, c, h, w),)

    return _record(out, "max_pool2d", (x,), bw)


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    hw = h * w

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, (n, c, h, w)).copy(),)

    return _record(x.data.mean(axis=(2, 3)), "global_average_pool", (x,), bw)


# --------------------------------------------------------------------------
# probabilities and losses

def _softmax(z: np.ndarray) -> np.ndarray:
    if z.shape[-1] == 0:
        raise ValueError("softmax over an empty class axis")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    if z.shape[-1] == 0:
        raise ValueError("log_softmax over an empty class axis")
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax(x: Tensor) -> Tensor:
    p = _softmax(x.data)
    return _record(p, "softmax", (x,),
                   lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    ls = _log_softmax(x.data)
    p = np.exp(ls)
    return _record(ls, "log_softmax", (x,),
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("cross_entropy over an empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    ls = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -ls[rows, labels].mean()

    def bw(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _record(np.asarray(loss), "cross_entropy", (logits,), bw)


def _teacher_array(teacher_probs, shape) -> np.ndarray:
    q = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs, dtype=np.float64)
    if q.shape != shape:
        raise ValueError(f"teacher shape {q.shape} != student shape {shape}")
    return q


def mse_consistency(student_logits: Tensor, teacher_probs) -> Tensor:
    """Mean squared difference of softmax(student) and the (constant) teacher."""
    q = _teacher_array(teacher_probs, student_logits.shape)
    p = _softmax(student_logits.data)
    diff = p - q
    loss = np.mean(diff ** 2)

    def bw(g):
        dp = (2.0 * g / diff.size) * diff
        return (p * (dp - (dp * p).sum(axis=-1, keepdims=True)),)

    return _record(np.asarray(loss), "mse_consistency", (student_logits,), bw)


def kl_consistency(student_logits: Tensor, teacher_probs) -> Tensor:
    """Batch mean of KL(teacher || softmax(student)); teacher is constant."""
    q = _teacher_array(teacher_probs, student_logits.shape)
    if np.any(q < 0):
        raise ValueError("teacher probabilities must be nonnegative")
    n = q.shape[0]
    ls = _log_softmax(student_logits.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    loss = (qlogq - q * ls).sum() / n

    def bw(g):
        p = np.exp(ls)
        return ((p * q.sum(axis=-1, keepdims=True) - q) * (g / n),)

    return _record(np.asarray(loss), "kl_consistency", (student_logits,), bw)


# --------------------------------------------------------------------------
# reverse pass

def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not on the tape (no input requires grad)")
    seed = np.ones(loss.shape) if grad is None else np.asarray(grad, dtype=np.float64).reshape(loss.shape)

    # collect interior tensors reachable from the loss
    interior: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in interior:
            continue
        interior[id(t)] = t
        stack.extend(i for i in t.node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for t in sorted(interior.values(), key=lambda t: t.node.seq, reverse=True):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


def gradient_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise ValueError(f"gradient_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - (fp - fm) / (2 * step)) / max(1.0, abs(a)))
    return worst
