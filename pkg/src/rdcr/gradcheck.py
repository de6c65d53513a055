"""Finite-difference audit of every parameter gradient of the full training loss.

Central differences need two loss evaluations per scalar parameter, which is
far too slow done one network at a time.  Two things make it tractable:
activations before the perturbed layer are cached, and for convolution
weights all perturbed copies of the network are stacked along the batch axis
so that the layers after the perturbation run once per chunk.  Stacking is
only sound when normalization is per sample; under batch normalization every
entry falls back to an individual evaluation.

An entry whose stencil straddles a ReLU or max-pool kink gets a meaningless
difference quotient.  Entries that miss the tolerance at the base step are
therefore re-measured once at a step ten times smaller; the report counts
how many needed this.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .data import ShapeSetSpec, generate_shapeset
from .nn import (NetworkParams, NormalizationKind, _standardize_rows, build_backbone, heads, trunk,
                 weight_standardize)
from .rotation import expand_rotations, unrotated_rows
from .training import rdcr_loss

STEP = 1e-5
TOLERANCE = 1e-4
CHUNK_FLOATS = 2_000_000


@dataclass
class Problem:
    """A fixed mini-batch and loss configuration."""

    params: NetworkParams
    images: np.ndarray           # (4N, C, H, W), rotated copies with input noise
    rotation_labels: np.ndarray  # (4N,)
    teacher_probs: np.ndarray    # (N, K)
    observed: np.ndarray         # (N,)
    supervised: np.ndarray       # (N,) bool
    weights: tuple
    consistency: str = "mse"

    @property
    def n(self) -> int:
        return len(self.observed)


@dataclass
class TensorReport:
    name: str
    size: int
    max_error: float
    refined: int = 0


@dataclass
class GradcheckReport:
    tensors: list = field(default_factory=list)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max((t.max_error for t in self.tensors), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.tensors) and self.worst < self.tolerance

    @property
    def checked(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def refined(self) -> int:
        return sum(t.refined for t in self.tensors)


def tiny_problem(seed: int = 0, K: int = 4, batch: int = 4, image_size: int = 8, width: float = 0.125,
                 norm: str = "group_ws", weights=(1.0, 10.0, 0.5), consistency: str = "mse") -> Problem:
    """Tiny network plus one batch.  Dropout is off so the loss is a fixed function."""
    train, _ = generate_shapeset(ShapeSetSpec(num_classes=K, image_size=image_size,
                                              n_train=max(4 * K, batch), n_test=K), seed)
    rng = np.random.default_rng(seed)
    x = train.images[:batch]
    params = build_backbone(x.shape[1], K, NormalizationKind.parse(norm), width, dropout=0.0, seed=seed)
    rotated, rot_labels = expand_rotations(x)
    rotated = rotated + rng.normal(0.0, 0.15, rotated.shape)
    teacher = params.copy(requires_grad=False)
    for t in teacher.parameters():
        t.data += rng.normal(0.0, 0.05, t.data.shape)
    with ad.no_grad():
        tl, _, _ = _forward(teacher, x + rng.normal(0.0, 0.15, x.shape))
    observed = rng.integers(0, K, size=batch)
    supervised = np.arange(batch) < max(1, batch - 1)
    return Problem(params, rotated, rot_labels, ad._softmax(tl.data), observed, supervised,
                   tuple(weights), consistency)


def _forward(params, x, rows=None):
    return heads(params, trunk(params, Tensor(x), 0, True, None, rows))


def loss_tensor(p: Problem) -> Tensor:
    rows = unrotated_rows(p.n)
    cls, rot, _ = _forward(p.params, p.images, rows)
    total, _ = rdcr_loss(ad.take(cls, rows), p.teacher_probs, p.observed, p.supervised, rot,
                         p.rotation_labels, p.weights, p.consistency)
    return total


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def stacked_losses(p: Problem, cls: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Loss of every network copy from logits stacked copy-major."""
    m = len(p.images)
    copies = cls.shape[0] // m
    ws, wc, wr = p.weights
    cls = cls.reshape(copies, m, -1)[:, unrotated_rows(p.n)]
    rot = rot.reshape(copies, m, -1)
    out = np.zeros(copies)
    lp = _log_softmax(cls)
    sup = np.flatnonzero(p.supervised)
    if sup.size and ws:
        out += ws * -lp[:, sup, p.observed[sup]].mean(axis=1)
    if wc:
        if p.consistency == "mse":
            out += wc * ((np.exp(lp) - p.teacher_probs) ** 2).mean(axis=(1, 2))
        else:
            q = p.teacher_probs
            logq = np.log(np.where(q > 0, q, 1.0))
            out += wc * (np.where(q > 0, q * (logq - lp), 0.0)).sum(axis=2).mean(axis=1)
    if wr:
        lr = _log_softmax(rot)
        out += wr * -lr[:, np.arange(m), p.rotation_labels].mean(axis=1)
    return out


def _tail_losses(p: Problem, h: np.ndarray, layer: int, conv_done: bool) -> np.ndarray:
    rows = unrotated_rows(p.n)
    with ad.no_grad():
        if layer < len(p.params.backbone):
            h = trunk(p.params, Tensor(h), layer, True, None, rows, update_stats=False, conv_done=conv_done)
        else:
            h = Tensor(h)
        cls, rot, _ = heads(p.params, h)
    return stacked_losses(p, cls.data, rot.data)


def _cache(p: Problem):
    """Inputs and convolution outputs of every backbone layer, plus the trunk output."""
    rows = unrotated_rows(p.n)
    inputs, conv_out = [], []
    h = Tensor(p.images)
    norm = p.params.norm
    with ad.no_grad():
        for i, layer in enumerate(p.params.backbone):
            inputs.append(h.data)
            w = layer.weight
            if norm.with_weight_standardization:
                w = weight_standardize(w, norm.epsilon)
            c = ad.conv2d(h, w, None, stride=1, padding=1)
            conv_out.append(c.data)
            h = trunk(p.params, c, i, True, None, rows, update_stats=False, conv_done=True, stop=i + 1)
    return inputs, conv_out, h.data


def _sequential(arr: np.ndarray, resume, entries=None, step: float = STEP) -> np.ndarray:
    flat = arr.reshape(-1)
    entries = range(flat.size) if entries is None else entries
    fd = np.empty(len(entries))
    for k, j in enumerate(entries):
        orig = flat[j]
        vals = []
        for s in (step, -step):
            flat[j] = orig + s
            vals.append(resume()[0])
        flat[j] = orig
        fd[k] = (vals[0] - vals[1]) / (2 * step)
    return fd


def _conv_fd(p: Problem, i: int, x_in: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Central differences for every entry of layer ``i``'s convolution weight, stacked."""
    w = p.params.backbone[i].weight.data
    o, c, kh, kw = w.shape
    xp = np.pad(x_in, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
    patches = patches.reshape(*patches.shape[:3], c * kh * kw)
    rows = w.reshape(o, -1)
    norm = p.params.norm
    per_copy = base[0].size * base.shape[0]
    chunk = max(1, CHUNK_FLOATS // per_copy // 2)
    entries = np.arange(w.size)
    fd = np.empty(w.size)
    for start in range(0, w.size, chunk):
        ent = entries[start:start + chunk]
        oi, col = np.divmod(ent, c * kh * kw)
        delta = np.zeros((len(ent), c * kh * kw))
        delta[np.arange(len(ent)), col] = STEP
        filt = np.concatenate([rows[oi] + delta, rows[oi] - delta])
        if norm.with_weight_standardization:
            filt = _standardize_rows(filt, norm.epsilon)[0]
        channel = np.einsum("nhwk,pk->pnhw", patches, filt)
        stacked = np.broadcast_to(base, (len(filt),) + base.shape).copy()
        both = np.concatenate([oi, oi])
        stacked[np.arange(len(filt)), :, both] = channel
        losses = _tail_losses(p, stacked.reshape(-1, *base.shape[1:]), i, conv_done=True)
        fd[start:start + len(ent)] = (losses[:len(ent)] - losses[len(ent):]) / (2 * STEP)
    return fd


def run_gradcheck(p: Problem, tolerance: float = TOLERANCE) -> GradcheckReport:
    """Compare backprop against central differences for every scalar parameter."""
    t0 = time.perf_counter()
    params = p.params
    params.zero_grad()
    ad.backward(loss_tensor(p))
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
                for name, t in params.named_parameters()}
    inputs, conv_out, feats = _cache(p)
    stackable = params.norm.kind != "batch"
    report = GradcheckReport(tolerance=tolerance)
    n_layers = len(params.backbone)
    for name, t in params.named_parameters():
        part, _, attr = name.rpartition(".")
        if part.startswith("backbone."):
            i = int(part.split(".")[1])
            if attr == "weight":
                resume = (lambda i=i: _tail_losses(p, inputs[i], i, False))
            else:
                resume = (lambda i=i: _tail_losses(p, conv_out[i], i, True))
        else:
            resume = (lambda: _tail_losses(p, feats, n_layers, False))
        if attr == "weight" and part.startswith("backbone.") and stackable:
            fd = _conv_fd(p, i, inputs[i], conv_out[i])
        else:
            fd = _sequential(t.data, resume)
        a = analytic[name]
        err = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
        bad = np.flatnonzero(err >= tolerance)
        if bad.size:
            fd_fine = _sequential(t.data, resume, bad, STEP / 10)
            err[bad] = np.abs(a[bad] - fd_fine) / np.maximum(1.0, np.abs(a[bad]))
        report.tensors.append(TensorReport(name, t.size, float(err.max()), int(bad.size)))
    params.zero_grad()
    report.seconds = time.perf_counter() - t0
    return report
