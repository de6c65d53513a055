"""Rotational-decoupling consistency training.

Objective per mini-batch::

    w_S * mean_{s in D_S} CE(class(z_s), observed_s)
  + w_C * mean_n consistency(class(z_n), teacher_n)
  + w_R * mean_{r in 4n} CE(rotation(z_r), angle_r)

Only the un-rotated copies feed the supervised and consistency terms.  The
teacher is an exponential moving average of the student; fast-SWA averages
student snapshots taken at the end of each cyclic learning-rate cycle.
"""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .metrics import MetricsRecord, accuracy
from .nn import NetworkParams, NormalizationKind, build_backbone, forward
from .noise import NoisyDataset
from .rotation import expand_rotations, unrotated_rows

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant", "cosine_ramp_up", "cosine_ramp_down", "linear_ramp_up")


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int = -1, step: int = -1):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


# --------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"
    start_value: float = 0.0
    end_value: Optional[float] = None
    length: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.end_value is None:
            object.__setattr__(self, "end_value", self.start_value)

    def __call__(self, t: float) -> float:
        return schedule_value(self, t)

    @property
    def identically_zero(self) -> bool:
        return self.start_value == 0 and (self.kind == "constant" or self.end_value == 0)


def schedule_value(s: Schedule, t: float) -> float:
    if s.length <= 0:
        raise ValueError("schedule length must be positive")
    if t < 0:
        raise ValueError("schedule time must be nonnegative")
    if s.kind == "constant":
        return float(s.start_value)
    r = min(t / s.length, 1.0)
    a, b = s.start_value, s.end_value
    if s.kind == "linear_ramp_up":
        return a + (b - a) * r
    if s.kind == "cosine_ramp_up":
        return a + (b - a) * (1.0 - math.cos(math.pi * r)) / 2.0
    # cosine_ramp_down: starts at a, cosine-anneals to b
    return b + (a - b) * (1.0 + math.cos(math.pi * r)) / 2.0


@dataclass(frozen=True)
class LossWeights:
    omega_S: Schedule = Schedule("constant", 1.0)
    omega_C: Schedule = Schedule("constant", 0.0)
    omega_R: Schedule = Schedule("constant", 0.0)

    def at(self, t: float) -> tuple[float, float, float]:
        vals = self.omega_S(t), self.omega_C(t), self.omega_R(t)
        if min(vals) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {vals}")
        return vals


def cyclic_lr(epoch: float, base_lr: float, cycle_length: int, pretrain_epochs: int,
              floor: float = 0.0, pretrain_span: Optional[float] = None) -> float:
    """Cosine decay during pretraining, then cosine cycles restarting at ``base_lr``.

    Within a cycle, position 0 gives ``base_lr`` and the cycle's last epoch
    (position ``cycle_length - 1``) gives ``floor``.  ``pretrain_span`` is
    the horizon of the pretraining cosine (defaults to ``pretrain_epochs``).
    """
    if cycle_length < 1:
        raise ValueError("cycle_length must be >= 1")
    if epoch < pretrain_epochs:
        span = pretrain_span or pretrain_epochs
        return floor + (base_lr - floor) * (1.0 + math.cos(math.pi * min(epoch / span, 1.0))) / 2.0
    if cycle_length == 1:
        return base_lr
    t = (epoch - pretrain_epochs) % cycle_length
    return floor + (base_lr - floor) * (1.0 + math.cos(math.pi * t / (cycle_length - 1))) / 2.0


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    setting: str = "simplified_nl"
    consistency: str = "mse"
    weights: LossWeights = LossWeights()
    rotation: bool = True
    clip_threshold: float = 3.0
    lr: float = 0.05
    lr_floor: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 2e-4
    ema_decay: float = 0.99
    ema_decay_late: float = 0.999
    ema_switch_epoch: Optional[float] = None
    epochs: int = 60
    batch_size: int = 64
    labeled_batch_size: int = 16
    swa_pretrain_epochs: Optional[int] = None
    swa_cycles: int = 0
    swa_cycle_length: int = 30
    captures_per_cycle: int = 1
    augment_shift: int = 2
    augment_flip: bool = True
    input_noise: float = 0.15
    eval_batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.setting not in ("simplified_nl", "semi_sl"):
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.consistency not in ("mse", "kl"):
            raise ValueError(f"unknown consistency loss {self.consistency!r}")
        if self.clip_threshold <= 0:
            raise ValueError("clip threshold must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 <= self.ema_decay < 1 or not 0 <= self.ema_decay_late < 1:
            raise ValueError("EMA decay must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.swa_cycles < 0 or self.swa_cycle_length < 1 or self.captures_per_cycle < 1:
            raise ValueError("invalid SWA cycle specification")
        if self.setting == "semi_sl" and not 0 <= self.labeled_batch_size <= self.batch_size:
            raise ValueError("labeled_batch_size must lie in [0, batch_size]")

    @property
    def pretrain_epochs(self) -> int:
        if self.swa_cycles == 0:
            return self.epochs
        return self.swa_pretrain_epochs if self.swa_pretrain_epochs is not None else \
            self.epochs - self.swa_cycles * self.swa_cycle_length

    def lr_at(self, epoch: float) -> float:
        p = self.pretrain_epochs
        return cyclic_lr(epoch, self.lr, self.swa_cycle_length, p, self.lr_floor,
                         pretrain_span=p + 1 if self.swa_cycles == 0 else None)

    def ema_decay_at(self, epoch: float) -> float:
        switch = self.ema_switch_epoch
        if switch is None:
            switch = self.weights.omega_C.length if self.weights.omega_C.kind != "constant" else 0
        return self.ema_decay if epoch < switch else self.ema_decay_late

    def is_swa_capture_epoch(self, epoch: int) -> bool:
        p, L = self.pretrain_epochs, self.swa_cycle_length
        if self.swa_cycles == 0 or epoch < p or epoch >= p + self.swa_cycles * L:
            return False
        pos = (epoch - p) % L
        stride = max(L // self.captures_per_cycle, 1)
        return (L - 1 - pos) % stride == 0 and (L - 1 - pos) // stride < self.captures_per_cycle


# --------------------------------------------------------------------------
# loss

def rdcr_loss(class_logits: Tensor, teacher_probs, observed_labels, supervised_mask,
              rotation_logits: Optional[Tensor], rotation_labels, weights: Sequence[float],
              consistency: str = "mse"):
    """Three-term objective on one batch.

    ``class_logits`` are the student's logits on the N' un-rotated copies;
    ``rotation_logits`` cover all 4N' rotated copies (or ``None``).
    Returns ``(total, parts)`` where parts are the un-weighted terms.
    """
    n = class_logits.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    ws, wc, wr = weights
    supervised_mask = np.asarray(supervised_mask, dtype=bool)
    sup_idx = np.flatnonzero(supervised_mask)
    parts = {"supervised": 0.0, "consistency": 0.0, "rotation": 0.0}
    terms = []
    if sup_idx.size:
        logits = class_logits if sup_idx.size == n else ad.take(class_logits, sup_idx)
        sup = ad.cross_entropy(logits, np.asarray(observed_labels)[sup_idx])
        parts["supervised"] = sup.item()
        if ws:
            terms.append(ad.scale(sup, ws))
    if teacher_probs is not None:
        fn = ad.mse_consistency if consistency == "mse" else ad.kl_consistency
        cons = fn(class_logits, teacher_probs)
        parts["consistency"] = cons.item()
        if wc:
            terms.append(ad.scale(cons, wc))
    elif wc:
        raise ValueError("consistency weight is nonzero but no teacher predictions were given")
    if rotation_logits is not None:
        if rotation_logits.shape[0] != 4 * n:
            raise ValueError(f"expected {4 * n} rotated copies, got {rotation_logits.shape[0]}")
        rot = ad.cross_entropy(rotation_logits, rotation_labels)
        parts["rotation"] = rot.item()
        if wr:
            terms.append(ad.scale(rot, wr))
    elif wr:
        raise ValueError("rotation weight is nonzero but rotation copies are missing")
    if not terms:
        total = Tensor(0.0)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
    parts["total"] = total.item()
    return total, parts


# --------------------------------------------------------------------------
# optimizer pieces

def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], tau: float) -> list[np.ndarray]:
    """Rescale all gradients by tau/norm when the global L2 norm exceeds tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        bad = [i for i, g in enumerate(grads) if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient in parameter blocks {bad}")
    if norm <= tau:
        return list(grads)
    c = tau / norm
    return [g * c for g in grads]


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], velocities: Sequence[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In place: v <- momentum*v + grad + wd*param;  param <- param - lr*v."""
    if not len(params) == len(grads) == len(velocities):
        raise ValueError("params, grads and velocities must align")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


@dataclass
class TeacherState:
    params: NetworkParams
    ema_decay: float = 0.99


def _mirror_arrays(a: NetworkParams, b: NetworkParams):
    da, db = a.arrays(), b.arrays()
    if da.keys() != db.keys() or any(da[k].shape != db[k].shape for k in da):
        raise ValueError("parameter sets do not mirror each other")
    return da, db


def ema_update(teacher: TeacherState, student: NetworkParams, decay: Optional[float] = None) -> TeacherState:
    """theta_teacher <- decay * theta_teacher + (1 - decay) * theta_student (buffers included)."""
    d = teacher.ema_decay if decay is None else decay
    dt, ds = _mirror_arrays(teacher.params, student)
    for k, t in dt.items():
        t *= d
        t += (1.0 - d) * ds[k]
    return teacher


@dataclass
class SWAState:
    averaged_params: Optional[NetworkParams] = None
    capture_count: int = 0


def swa_capture(swa: SWAState, params: NetworkParams) -> SWAState:
    """Fold one snapshot into the running equal-weight average."""
    if swa.averaged_params is None:
        swa.averaged_params = params.copy(requires_grad=False)
        swa.capture_count = 1
        return swa
    da, dp = _mirror_arrays(swa.averaged_params, params)
    n = swa.capture_count
    for k, a in da.items():
        a *= n
        a += dp[k]
        a /= n + 1
    swa.capture_count = n + 1
    return swa


# --------------------------------------------------------------------------
# inference helpers

def predict_proba(params: NetworkParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            logits, _, _ = forward(params, Tensor(images[i:i + batch_size]), "eval")
            out.append(ad._softmax(logits.data))
    return np.concatenate(out) if out else np.zeros((0, params.num_classes))


def pseudo_labels(params: NetworkParams, images: np.ndarray, batch_size: int = 256):
    """Teacher argmax labels (ties go to the smaller class) and probability rows."""
    probs = predict_proba(params, images, batch_size)
    return probs.argmax(axis=1), probs


def evaluate(params: NetworkParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    return accuracy(pseudo_labels(params, images, batch_size)[0], labels)


# --------------------------------------------------------------------------
# augmentation

def augment(images: np.ndarray, rng: np.random.Generator, max_shift: int = 2, flip: bool = True) -> np.ndarray:
    """Random translation (reflect padding) and horizontal flip."""
    x = images
    if max_shift > 0:
        n, c, h, w = x.shape
        s = max_shift
        xp = np.pad(x, ((0, 0), (0, 0), (s, s), (s, s)), mode="reflect")
        win = sliding_window_view(xp, (h, w), axis=(2, 3))
        dy = rng.integers(0, 2 * s + 1, n)
        dx = rng.integers(0, 2 * s + 1, n)
        x = win[np.arange(n), :, dy, dx]
    if flip:
        mask = rng.random(len(x)) < 0.5
        x = np.where(mask[:, None, None, None], x[..., ::-1], x)
    return np.ascontiguousarray(x)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainingResult:
    student: NetworkParams
    teacher: TeacherState
    swa: SWAState
    log: list = field(default_factory=list)
    best_student: Optional[NetworkParams] = None


def _batches(ds: NoisyDataset, config: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    train = ds.train_index_set if ds.train_index_set is not None else np.arange(ds.N)
    bs = config.batch_size
    if config.setting == "semi_sl" and config.labeled_batch_size > 0:
        labeled = ds.supervised_index_set
        unlabeled = np.setdiff1d(train, labeled)
        nl = config.labeled_batch_size
        nu = bs - nl
        if len(labeled) == 0:
            raise ValueError("semi_sl training needs a non-empty labeled subset")
        order_u = rng.permutation(unlabeled)
        n_batches = max(1, math.ceil(len(order_u) / max(nu, 1))) if nu else math.ceil(len(labeled) / nl)
        reps = math.ceil(n_batches * nl / len(labeled))
        order_l = np.concatenate([rng.permutation(labeled) for _ in range(reps)])
        return [np.concatenate([order_l[i * nl:(i + 1) * nl], order_u[i * nu:(i + 1) * nu]])
                for i in range(n_batches)]
    order = rng.permutation(train)
    return [order[i:i + bs] for i in range(0, len(order), bs)]


def run_training(config: TrainConfig, dataset: NoisyDataset, params: NetworkParams,
                 test: Optional[tuple[np.ndarray, np.ndarray]] = None,
                 on_epoch: Optional[Callable[[MetricsRecord], None]] = None) -> TrainingResult:
    """Train ``params`` (modified in place) under ``config``; returns models and log.

    ``test`` is an optional ``(images, labels)`` pair evaluated every epoch.
    Deterministic under ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    student = params
    teacher = TeacherState(student.copy(requires_grad=False), config.ema_decay)
    swa = SWAState()
    result = TrainingResult(student, teacher, swa)
    if config.epochs == 0:
        return result

    images = dataset.images
    observed = dataset.observed_labels
    in_ds = np.zeros(dataset.N, dtype=bool)
    in_ds[dataset.supervised_index_set if dataset.supervised_index_set is not None else np.arange(dataset.N)] = True
    train_idx = dataset.train_index_set if dataset.train_index_set is not None else np.arange(dataset.N)
    val_idx = dataset.validation_index_set
    true_train = dataset.audit_true_labels()[train_idx]
    tensors = student.parameters()
    velocities = [np.zeros_like(t.data) for t in tensors]
    step = 0
    best_val = -1.0
    # without a consistency term the teacher's batch predictions are never used
    use_teacher = not config.weights.omega_C.identically_zero

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        ws, wc, wr = config.weights.at(epoch)
        sums = np.zeros(4)
        n_batches = 0
        for b, idx in enumerate(_batches(dataset, config, rng)):
            xb = images[idx]
            student_view = augment(xb, rng, config.augment_shift, config.augment_flip)
            teacher_view = augment(xb, rng, config.augment_shift, config.augment_flip) if use_teacher else None
            rot_labels = None
            stat_rows = None
            if config.rotation:
                student_view, rot_labels = expand_rotations(student_view)
                stat_rows = unrotated_rows(len(idx))
            if config.input_noise:
                student_view = student_view + rng.normal(0.0, config.input_noise, student_view.shape)
                if use_teacher:
                    teacher_view = teacher_view + rng.normal(0.0, config.input_noise, teacher_view.shape)

            cls, rot, _ = forward(student, Tensor(student_view), "train", rng, stat_rows=stat_rows)
            if config.rotation:
                cls = ad.take(cls, stat_rows)
            else:
                rot = None
            tprobs = None
            if use_teacher:
                with ad.no_grad():
                    tcls, _, _ = forward(teacher.params, Tensor(teacher_view), "train", rng, update_stats=False)
                    tprobs = ad._softmax(tcls.data)
            total, parts = rdcr_loss(cls, tprobs, observed[idx], in_ds[idx], rot, rot_labels,
                                     (ws, wc, wr), config.consistency)
            if not math.isfinite(parts["total"]):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {b}", epoch, b)
            student.zero_grad()
            if total.requires_grad:
                ad.backward(total)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
            try:
                grads = clip_gradients(grads, config.clip_threshold)
            except NonFiniteError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch} step {b}", epoch, b) from exc
            sgd_step([t.data for t in tensors], grads, velocities, lr, config.momentum, config.weight_decay)
            step += 1
            decay = min(1.0 - 1.0 / (step + 1), config.ema_decay_at(epoch))
            ema_update(teacher, student, decay)
            sums += [parts["supervised"], parts["consistency"], parts["rotation"], parts["total"]]
            n_batches += 1
        student.zero_grad()

        if config.is_swa_capture_epoch(epoch):
            swa_capture(swa, student)

        bs = config.eval_batch_size
        val_acc = evaluate(student, images[val_idx], observed[val_idx], bs) if val_idx is not None and len(val_idx) else float("nan")
        if test is not None:
            acc_s = evaluate(student, test[0], test[1], bs)
            acc_t = evaluate(teacher.params, test[0], test[1], bs)
            acc_w = evaluate(swa.averaged_params, test[0], test[1], bs) if swa.averaged_params is not None else float("nan")
        else:
            acc_s = acc_t = acc_w = float("nan")
        pseudo = pseudo_labels(teacher.params, images[train_idx], bs)[0]
        mean_parts = sums / max(n_batches, 1)
        rec = MetricsRecord(epoch=epoch, lr=lr, w_s=ws, w_c=wc, w_r=wr,
                            loss_sup=float(mean_parts[0]), loss_cons=float(mean_parts[1]),
                            loss_rot=float(mean_parts[2]), loss_total=float(mean_parts[3]), val_acc=val_acc, test_acc_student=acc_s,
                            test_acc_teacher=acc_t, test_acc_swa=acc_w,
                            pseudo_acc=accuracy(pseudo, true_train))
        result.log.append(rec)
        if val_acc > best_val:
            best_val = val_acc
            result.best_student = student.copy(requires_grad=False)
        if on_epoch is not None:
            on_epoch(rec)
        log.debug("epoch %d: %s", epoch, rec)
    return result


# --------------------------------------------------------------------------
# checkpoint format
#
#   b"RDCR" | u32 version | u32 K | f64 width | u8 normalization code
#   u32 block count, then per block:
#   u32 name length | utf-8 name | u32 ndim | u32 dims... | f64 data (little-endian)

MAGIC = b"RDCR"
FORMAT_VERSION = 1
NORM_CODES = {"batch": 0, "instance": 1, "layer": 2, "group": 3, "group_ws": 4}


def save_checkpoint(path, params: NetworkParams) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIdB", FORMAT_VERSION, params.num_classes, params.width,
                          NORM_CODES[params.norm.label]))
    blocks = list(params.arrays().items())
    blocks += [("meta.in_channels", np.array([params.in_channels], float)),
               ("meta.group_size", np.array([params.norm.group_size], float)),
               ("meta.epsilon", np.array([params.norm.epsilon])),
               ("meta.dropout", np.array([params.dropout]))]
    buf.write(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class CheckpointFormatError(OSError):
    """The file exists but is not a readable checkpoint."""


def load_checkpoint(path) -> NetworkParams:
    try:
        return _load_checkpoint(path)
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint {path} is malformed: {exc}") from exc


def _load_checkpoint(path) -> NetworkParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path} is not an RDCR checkpoint")
    version, K, width, code = struct.unpack_from("<IIdB", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IIdB")
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blocks = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(raw):
            raise CheckpointFormatError(f"checkpoint {path} is truncated")
        blocks[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    label = {v: k for k, v in NORM_CODES.items()}[code]
    norm = NormalizationKind.parse(label, int(blocks.pop("meta.group_size")[0]))
    norm = replace(norm, epsilon=float(blocks.pop("meta.epsilon")[0]))
    params = build_backbone(int(blocks.pop("meta.in_channels")[0]), K, norm, width,
                            float(blocks.pop("meta.dropout")[0]))
    arrays = params.arrays()
    if arrays.keys() != blocks.keys():
        raise CheckpointFormatError("checkpoint blocks do not match the declared architecture")
    for k, a in arrays.items():
        a[...] = blocks[k]
    return params
