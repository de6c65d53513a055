"""Double-head 13-layer CNN with pluggable normalization.

Normalizers use ``max(std, epsilon)`` as the denominator, so a degenerate
(constant) slice maps to zero and non-degenerate slices are standardized
exactly.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_KINDS = ("batch", "instance", "layer", "group")
BASE_WIDTHS = (128, 128, 128, 256, 256, 256, 512, 256, 128)
EPSILON = 1e-5
BN_MOMENTUM = 0.9
POOL_AFTER = (2, 5)


@dataclass(frozen=True)
class NormalizationKind:
    kind: str = "group"
    group_size: int = 16
    with_weight_standardization: bool = False
    epsilon: float = EPSILON

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown normalization kind {self.kind!r}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def parse(cls, name: str, group_size: int = 16) -> "NormalizationKind":
        """Accepts batch, instance, layer, group and group_ws (GN+WS)."""
        if name == "group_ws":
            return cls("group", group_size, True)
        return cls(name, group_size)

    @property
    def label(self) -> str:
        if self.kind == "group" and self.with_weight_standardization:
            return "group_ws"
        return self.kind

    def groups(self, channels: int) -> int:
        """Number of channel groups for a layer of ``channels`` channels."""
        if self.kind == "layer":
            return 1
        if self.kind == "instance":
            return channels
        if self.kind == "group":
            if channels % self.group_size:
                raise ValueError(f"{channels} channels not divisible by group size {self.group_size}")
            return channels // self.group_size
        raise ValueError("batch normalization has no channel groups")


def _standardize_rows(x: np.ndarray, eps: float):
    m = x.shape[1]
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    std = np.sqrt(np.einsum("ij,ij->i", xc, xc)[:, None] / m)
    floored = std < eps
    sigma = np.where(floored, eps, std)
    xc /= sigma
    return xc, sigma, floored


def _standardize_rows_backward(g, xhat, sigma, floored):
    m = g.shape[1]
    gm = g.mean(axis=1, keepdims=True)
    # below the floor sigma is constant, so only the centring contributes
    gxm = np.where(floored, 0.0, np.einsum("ij,ij->i", g, xhat)[:, None] / m)
    out = g - gm
    out -= xhat * gxm
    out /= sigma
    return out


def weight_standardize(weight: Tensor, epsilon: float = EPSILON) -> Tensor:
    """Per output filter: subtract the mean, divide by the population std."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    shape = weight.shape
    rows = weight.data.reshape(shape[0], -1)
    y, sigma, floored = _standardize_rows(rows, epsilon)
    return ad._record(y.reshape(shape), "weight_standardize", (weight,),
                      lambda g: (_standardize_rows_backward(g.reshape(rows.shape), y, sigma, floored).reshape(shape),))


def _affine(xhat: np.ndarray, gamma: Tensor, beta: Tensor, inputs, op: str, bw_x):
    c = xhat.shape[1]
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd
    out += beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = np.einsum("nchw,nchw->c", g, xhat)
        gbeta = g.sum(axis=(0, 2, 3))
        return (bw_x(g * gd), ggamma, gbeta)

    return ad._record(out, op, inputs, bw)


def group_norm(x: Tensor, kind: NormalizationKind, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample standardization within channel groups, then per-channel affine.

    Covers the layer (one group) and instance (one channel per group) kinds.
    """
    n, c, h, w = x.shape
    groups = kind.groups(c)
    rows = x.data.reshape(n * groups, -1)
    xhat, sigma, floored = _standardize_rows(rows, kind.epsilon)
    xhat4 = xhat.reshape(n, c, h, w)

    def bw_x(g):
        return _standardize_rows_backward(g.reshape(rows.shape), xhat, sigma, floored).reshape(x.shape)

    return _affine(xhat4, gamma, beta, (x, gamma, beta), "group_norm", bw_x)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, epsilon: float = EPSILON,
               stat_rows: Optional[np.ndarray] = None, update_stats: bool = True) -> Tensor:
    """Batch normalization; updates the running buffers in place when training.

    ``stat_rows`` restricts the samples whose statistics feed the running
    buffers (normalization itself always uses the whole batch).
    """
    n, c, h, w = x.shape
    if not training:
        sigma = np.maximum(np.sqrt(running_var), epsilon).reshape(1, c, 1, 1)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) / sigma
        return _affine(xhat, gamma, beta, (x, gamma, beta), "batch_norm_eval", lambda g: g / sigma)

    rows = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    xhat, sigma, floored = _standardize_rows(rows, epsilon)
    xhat4 = xhat.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    if update_stats:
        src = x.data if stat_rows is None else x.data[stat_rows]
        running_mean *= BN_MOMENTUM
        running_mean += (1 - BN_MOMENTUM) * src.mean(axis=(0, 2, 3))
        running_var *= BN_MOMENTUM
        running_var += (1 - BN_MOMENTUM) * src.var(axis=(0, 2, 3))

    def bw_x(g):
        gr = g.transpose(1, 0, 2, 3).reshape(c, -1)
        return _standardize_rows_backward(gr, xhat, sigma, floored).reshape(c, n, h, w).transpose(1, 0, 2, 3)

    return _affine(xhat4, gamma, beta, (x, gamma, beta), "batch_norm", bw_x)


# --------------------------------------------------------------------------
# parameters

@dataclass
class ConvLayer:
    weight: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


@dataclass
class Head:
    weight: Tensor
    bias: Tensor


@dataclass
class NetworkParams:
    """Shared backbone plus class and rotation heads."""

    backbone: list
    class_head: Head
    rotation_head: Head
    norm: NormalizationKind
    in_channels: int
    num_classes: int
    width: float
    dropout: float = 0.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        feat = self.backbone[-1].weight.shape[0]
        if self.class_head.weight.shape != (feat, self.num_classes):
            raise ValueError("class head does not match backbone feature width / class count")
        if self.rotation_head.weight.shape != (feat, 4):
            raise ValueError("rotation head must map backbone features to 4 outputs")

    @property
    def feature_width(self) -> int:
        return self.backbone[-1].weight.shape[0]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.backbone):
            out += [(f"backbone.{i}.weight", layer.weight), (f"backbone.{i}.gamma", layer.gamma),
                    (f"backbone.{i}.beta", layer.beta)]
        out += [("class_head.weight", self.class_head.weight), ("class_head.bias", self.class_head.bias),
                ("rotation_head.weight", self.rotation_head.weight),
                ("rotation_head.bias", self.rotation_head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.backbone):
            if layer.running_mean is not None:
                out += [(f"backbone.{i}.running_mean", layer.running_mean),
                        (f"backbone.{i}.running_var", layer.running_var)]
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """All parameter and buffer arrays by name (live references)."""
        d = {k: t.data for k, t in self.named_parameters()}
        d.update(self.named_buffers())
        return d

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def copy(self, requires_grad: Optional[bool] = None) -> "NetworkParams":
        new = copy.deepcopy(self)
        for t in new.parameters():
            t.grad = None
            t.node = None
            if requires_grad is not None:
                t.requires_grad = requires_grad
        return new

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())


def layer_widths(width: float) -> list[int]:
    widths = [int(round(b * width)) for b in BASE_WIDTHS]
    if min(widths) < 1:
        raise ValueError(f"width multiplier {width} collapses a layer to zero channels")
    return widths


def build_backbone(in_channels: int, num_classes: int, norm: NormalizationKind,
                   width: float = 1.0, dropout: float = 0.5, seed: int = 0) -> NetworkParams:
    """Build the 13-layer double-head network with seeded fan-in uniform init."""
    if in_channels < 1 or num_classes < 2:
        raise ValueError("need in_channels >= 1 and num_classes >= 2")
    if width <= 0:
        raise ValueError("width multiplier must be positive")
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout must be in [0, 1)")
    widths = layer_widths(width)
    if norm.kind == "group":
        for c in widths:
            norm.groups(c)
    rng = np.random.default_rng(seed)
    layers = []
    cin = in_channels
    for cout in widths:
        fan_in = cin * 9
        bound = np.sqrt(6.0 / fan_in)
        layer = ConvLayer(
            weight=Tensor(rng.uniform(-bound, bound, (cout, cin, 3, 3)), requires_grad=True),
            gamma=Tensor(np.ones(cout), requires_grad=True),
            beta=Tensor(np.zeros(cout), requires_grad=True),
        )
        if norm.kind == "batch":
            layer.running_mean = np.zeros(cout)
            layer.running_var = np.ones(cout)
        layers.append(layer)
        cin = cout

    def head(k):
        bound = 1.0 / np.sqrt(cin)
        return Head(Tensor(rng.uniform(-bound, bound, (cin, k)), requires_grad=True),
                    Tensor(np.zeros(k), requires_grad=True))

    return NetworkParams(layers, head(num_classes), head(4), norm, in_channels, num_classes,
                         width, dropout)


def _normalize(params: NetworkParams, layer: ConvLayer, h: Tensor, training: bool,
               stat_rows, update_stats: bool) -> Tensor:
    norm = params.norm
    if norm.kind == "batch":
        return batch_norm(h, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                          training, norm.epsilon, stat_rows, update_stats)
    return group_norm(h, norm, layer.gamma, layer.beta)


def forward(params: NetworkParams, x: Tensor, mode: str = "train",
            rng: Optional[np.random.Generator] = None, stat_rows=None,
            update_stats: bool = True):
    """Run the backbone and both heads.

    Returns ``(class_logits, rotation_logits, features)``.  In ``eval`` mode
    dropout is off and batch normalization uses its running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ValueError(f"expected input (N, {params.in_channels}, H, W), got {x.shape}")
    training = mode == "train"
    if training and params.dropout > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    h = trunk(params, x, 0, training, rng, stat_rows, update_stats)
    return heads(params, h)


def trunk(params: NetworkParams, h: Tensor, start: int = 0, training: bool = True,
          rng: Optional[np.random.Generator] = None, stat_rows=None, update_stats: bool = True,
          conv_done: bool = False, stop: Optional[int] = None) -> Tensor:
    """Backbone layers ``start`` up to (excluding) ``stop``.  With ``conv_done``
    the input is the convolution output of layer ``start``."""
    use_dropout = training and params.dropout > 0
    for i in range(start, len(params.backbone) if stop is None else stop):
        layer = params.backbone[i]
        if not (conv_done and i == start):
            w = layer.weight
            if params.norm.with_weight_standardization:
                w = weight_standardize(w, params.norm.epsilon)
            h = ad.conv2d(h, w, None, stride=1, padding=1)
        h = _normalize(params, layer, h, training, stat_rows, update_stats)
        h = ad.relu(h)
        if i in POOL_AFTER:
            h = ad.max_pool2d(h, 2)
            if use_dropout:
                h = ad.dropout(h, params.dropout, rng)
    return h


def heads(params: NetworkParams, h: Tensor):
    """Global pooling plus both heads: ``(class_logits, rotation_logits, features)``."""
    z = ad.global_average_pool(h)
    class_logits = ad.linear(z, params.class_head.weight, params.class_head.bias)
    rotation_logits = ad.linear(z, params.rotation_head.weight, params.rotation_head.bias)
    return class_logits, rotation_logits, z
