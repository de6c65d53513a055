"""Label-noise models: transition matrices, NAR corruption and data partitions."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

ROW_TOL = 1e-12


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic K x K matrix; entry (i, j) = P(observed j | true i)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise ValueError(f"transition matrix must be square, got shape {rows.shape}")
        if np.any(rows < 0):
            raise ValueError("transition matrix has negative entries")
        if np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValueError("transition matrix rows must sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.rows if dtype is None else self.rows.astype(dtype)


def _check_eps(eps: float) -> float:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {eps}")
    return float(eps)


def symmetric_matrix(K: int, eps: float, includes_self: bool = False) -> TransitionMatrix:
    """Flip with probability eps to one of the K-1 wrong classes uniformly.

    With ``includes_self`` the flip draws uniformly over all K classes, the
    other convention found in the literature.
    """
    if K < 2:
        raise ValueError("need K >= 2")
    eps = _check_eps(eps)
    if includes_self:
        T = np.full((K, K), eps / K)
        np.fill_diagonal(T, 1.0 - eps + eps / K)
    else:
        T = np.full((K, K), eps / (K - 1))
        np.fill_diagonal(T, 1.0 - eps)
    # float rounding of eps/(K-1) can leave rows ~1e-16 off
    T[np.arange(K), np.arange(K)] += 1.0 - T.sum(axis=1)
    return TransitionMatrix(T)


def default_pairing(K: int) -> list[int]:
    return [(k + 1) % K for k in range(K)]


def pairwise_asymmetric_matrix(K: int, eps: float,
                               pairing: Optional[Union[Mapping[int, int], Sequence[int]]] = None) -> TransitionMatrix:
    """Class k keeps its label with 1-eps and flips to ``pairing[k]`` with eps."""
    if K < 2:
        raise ValueError("need K >= 2")
    eps = _check_eps(eps)
    if pairing is None:
        pairing = default_pairing(K)
    targets = [pairing[k] for k in range(K)]
    T = np.zeros((K, K))
    for k, j in enumerate(targets):
        if not 0 <= j < K:
            raise ValueError(f"pairing target {j} out of range")
        if j == k:
            raise ValueError(f"class {k} is paired with itself")
        T[k, k] = 1.0 - eps
        T[k, j] = eps
    return TransitionMatrix(T)


@dataclass
class NoisyDataset:
    """Images with observed labels; true labels are reachable only via audit methods.

    Index sets refer to positions in ``images``.  ``train_index_set`` is D
    (everything but validation), ``supervised_index_set`` is D_S and
    ``labeled_index_set`` is D_L (semi-supervised setting only).
    """

    images: np.ndarray
    observed_labels: np.ndarray
    K: int
    _true_labels: np.ndarray = field(repr=False)
    train_index_set: Optional[np.ndarray] = None
    validation_index_set: Optional[np.ndarray] = None
    supervised_index_set: Optional[np.ndarray] = None
    labeled_index_set: Optional[np.ndarray] = None
    setting: Optional[str] = None

    def __post_init__(self):
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self._true_labels = np.asarray(self._true_labels, dtype=np.int64)
        n = len(self.images)
        if self.observed_labels.shape != (n,) or self._true_labels.shape != (n,):
            raise ValueError("label arrays must have one entry per image")
        for labels in (self.observed_labels, self._true_labels):
            if n and (labels.min() < 0 or labels.max() >= self.K):
                raise ValueError(f"labels must lie in [0, {self.K})")
        for name in ("train_index_set", "validation_index_set", "supervised_index_set", "labeled_index_set"):
            idx = getattr(self, name)
            if idx is not None:
                idx = np.asarray(idx, dtype=np.int64)
                if idx.size and (idx.min() < 0 or idx.max() >= n):
                    raise ValueError(f"{name} has indices outside [0, {n})")
                setattr(self, name, idx)

    @classmethod
    def from_clean(cls, images: np.ndarray, labels: np.ndarray, K: int) -> "NoisyDataset":
        labels = np.asarray(labels, dtype=np.int64)
        return cls(images, labels.copy(), K, labels.copy())

    @property
    def N(self) -> int:
        return len(self.images)

    # audit interface -----------------------------------------------------
    def audit_true_labels(self) -> np.ndarray:
        """Ground-truth labels; for evaluation and audits, never for training."""
        return self._true_labels.copy()

    def is_corrupted(self) -> np.ndarray:
        """``y != observed``; the complement of the clean indicator E."""
        return self._true_labels != self.observed_labels

    def corrupted_fraction(self, indices=None) -> float:
        c = self.is_corrupted()
        return float(c.mean() if indices is None else c[indices].mean())


def corrupt_labels(dataset: NoisyDataset, T: TransitionMatrix, seed: int) -> NoisyDataset:
    """Redraw each observed label from row ``y_n`` of ``T`` (noisy at random)."""
    T = T if isinstance(T, TransitionMatrix) else TransitionMatrix(T)
    if T.K != dataset.K:
        raise ValueError(f"matrix is {T.K}x{T.K} but dataset has K={dataset.K}")
    y = dataset._true_labels
    rng = np.random.default_rng(seed)
    u = rng.random(len(y))
    cdf = np.cumsum(T.rows, axis=1)
    observed = (u[:, None] >= cdf[y]).sum(axis=1)
    # u can exceed a cdf row that rounds to 1 - 1e-16
    observed = np.minimum(observed, T.K - 1)
    # never land on a zero-probability class because of that clamp
    bad = T.rows[y, observed] == 0
    if np.any(bad):
        observed[bad] = np.argmax(np.where(T.rows[y[bad]] > 0, np.arange(T.K), -1), axis=1)
    return replace(dataset, observed_labels=observed)


def empirical_transition(dataset: NoisyDataset, indices=None) -> TransitionMatrix:
    """Row i = frequency of observed labels among samples whose true label is i."""
    y = dataset._true_labels
    yo = dataset.observed_labels
    if indices is not None:
        y, yo = y[indices], yo[indices]
    K = dataset.K
    counts = np.zeros((K, K))
    np.add.at(counts, (y, yo), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        missing = np.flatnonzero(totals[:, 0] == 0).tolist()
        raise ValueError(f"classes {missing} have no samples")
    return TransitionMatrix(counts / totals)


def _balanced_pick(labels: np.ndarray, candidates: np.ndarray, total: int, K: int,
                   rng: np.random.Generator, what: str) -> np.ndarray:
    """Choose ``total`` candidates with per-class counts differing by at most 1."""
    per_class = [rng.permutation(candidates[labels[candidates] == k]) for k in range(K)]
    quota = np.full(K, total // K)
    quota[rng.permutation(K)[: total % K]] += 1
    picked = []
    for k in range(K):
        if quota[k] > len(per_class[k]):
            raise ValueError(f"{what}: class {k} has {len(per_class[k])} candidates, needs {quota[k]}")
        if quota[k] > 0 and len(per_class[k]) == 0:
            raise ValueError(f"{what}: class {k} has no candidates")
        picked.append(per_class[k][: quota[k]])
    return np.sort(np.concatenate(picked)).astype(np.int64)


def make_partitions(dataset: NoisyDataset, setting: str = "simplified_nl", L: int = 0,
                    validation_fraction: float = 0.01, seed: int = 0) -> NoisyDataset:
    """Carve a clean, class-balanced validation split and choose D_S.

    ``simplified_nl``: D_S is every remaining training index.
    ``semi_sl``: D_S = D_L, a class-balanced subset of size L whose observed
    labels are the true labels.
    """
    if setting not in ("simplified_nl", "semi_sl"):
        raise ValueError(f"unknown setting {setting!r}")
    if not 0.0 <= validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    n, K = dataset.N, dataset.K
    y = dataset._true_labels
    n_val = int(round(n * validation_fraction))
    everything = np.arange(n)
    val = _balanced_pick(y, everything, n_val, K, rng, "validation split") if n_val else np.zeros(0, np.int64)
    train = np.setdiff1d(everything, val)
    observed = dataset.observed_labels.copy()
    observed[val] = y[val]
    labeled = None
    if setting == "simplified_nl":
        supervised = train
    else:
        if L > len(train):
            raise ValueError(f"L={L} exceeds the {len(train)} training samples left after validation")
        if L < 0:
            raise ValueError("L must be nonnegative")
        labeled = _balanced_pick(y, train, L, K, rng, "labeled subset")
        observed[labeled] = y[labeled]
        supervised = labeled
    return replace(dataset, observed_labels=observed, train_index_set=train,
                   validation_index_set=val, supervised_index_set=supervised,
                   labeled_index_set=labeled, setting=setting)


# sidecar: per sample (true label u16, observed label u16), little-endian
_SIDECAR_DTYPE = np.dtype([("true", "<u2"), ("observed", "<u2")])


def write_label_sidecar(path, dataset: NoisyDataset) -> None:
    if dataset.K > 65536:
        raise ValueError("sidecar labels are u16")
    rec = np.empty(dataset.N, dtype=_SIDECAR_DTYPE)
    rec["true"] = dataset._true_labels
    rec["observed"] = dataset.observed_labels
    Path(path).write_bytes(rec.tobytes())


def read_label_sidecar(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(true_labels, observed_labels)``."""
    raw = Path(path).read_bytes()
    if len(raw) % _SIDECAR_DTYPE.itemsize:
        raise ValueError(f"sidecar {path} is truncated")
    rec = np.frombuffer(raw, dtype=_SIDECAR_DTYPE)
    return rec["true"].astype(np.int64), rec["observed"].astype(np.int64)
