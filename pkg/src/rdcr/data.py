"""Dataset sources: CIFAR binary files and the procedural ShapeSet."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

CIFAR_PIXELS = 3 * 32 * 32
CIFAR_FILES = {
    "cifar10": ([f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"], 1, 10),
    "cifar100": (["train.bin"], ["test.bin"], 2, 100),
}


@dataclass
class LabeledImages:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self):
        return len(self.labels)


# --------------------------------------------------------------------------
# CIFAR

def parse_cifar_records(raw: bytes, variant: str) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Parse CIFAR binary records into ``(labels, pixels uint8 (N,3,32,32), coarse)``.

    cifar10 records are 1 label byte + 3072 pixel bytes; cifar100 records
    carry a coarse and a fine label byte (the fine label is returned).
    """
    if variant not in CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    n_label, k = CIFAR_FILES[variant][2:]
    rec = n_label + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        raise ValueError(f"truncated {variant} file: {len(raw)} bytes is not a multiple of {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, n_label - 1].astype(np.int64)
    if labels.max() >= k:
        raise ValueError(f"label {labels.max()} out of range for {variant}")
    coarse = arr[:, 0].astype(np.int64) if n_label == 2 else None
    pixels = arr[:, n_label:].reshape(-1, 3, 32, 32).copy()
    return labels, pixels, coarse


def serialize_cifar_records(labels: np.ndarray, pixels: np.ndarray, variant: str,
                            coarse: Optional[np.ndarray] = None) -> bytes:
    """Inverse of :func:`parse_cifar_records`."""
    n_label = CIFAR_FILES[variant][2]
    n = len(labels)
    arr = np.empty((n, n_label + CIFAR_PIXELS), dtype=np.uint8)
    if n_label == 2:
        arr[:, 0] = 0 if coarse is None else coarse
    arr[:, n_label - 1] = labels
    arr[:, n_label:] = np.asarray(pixels, dtype=np.uint8).reshape(n, -1)
    return arr.tobytes()


def load_cifar(path, variant: str = "cifar10"):
    """Load train/test splits from a directory of CIFAR binary files.

    Pixels are scaled to [0, 1] and standardized per channel with the
    training split's mean and std.  Returns ``(train, test)``.
    """
    if variant not in CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    train_files, test_files, _, k = CIFAR_FILES[variant]
    root = Path(path)

    def read(files):
        parts = [parse_cifar_records((root / f).read_bytes(), variant) for f in files]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    ytr, xtr = read(train_files)
    yte, xte = read(test_files)
    xtr = xtr / 255.0
    xte = xte / 255.0
    mean = xtr.mean(axis=(0, 2, 3), keepdims=True)
    std = xtr.std(axis=(0, 2, 3), keepdims=True)
    return (LabeledImages((xtr - mean) / std, ytr, k), LabeledImages((xte - mean) / std, yte, k))


# --------------------------------------------------------------------------
# ShapeSet

# Strokes in a [-1, 1]^2 canvas, y pointing up.  Every glyph is left-right
# symmetric (a horizontal flip leaves it unchanged) but has a distinct "up",
# and no glyph is a quarter-turn of another.
GLYPHS = {
    "arrow": [((0, -1), (0, 1)), ((-0.6, 0.4), (0, 1)), ((0.6, 0.4), (0, 1))],
    "tee": [((-0.9, 1), (0.9, 1)), ((0, 1), (0, -1))],
    "wye": [((-0.8, 1), (0, 0)), ((0.8, 1), (0, 0)), ((0, 0), (0, -1))],
    "triangle": [((-0.9, -0.8), (0.9, -0.8)), ((-0.9, -0.8), (0, 1)), ((0.9, -0.8), (0, 1))],
    "cup": [((-0.8, 1), (-0.8, -0.9)), ((-0.8, -0.9), (0.8, -0.9)), ((0.8, -0.9), (0.8, 1))],
    "lollipop": [((-0.5, 1), (0.5, 1)), ((-0.5, 0.2), (0.5, 0.2)), ((-0.5, 1), (-0.5, 0.2)),
                 ((0.5, 1), (0.5, 0.2)), ((0, 0.2), (0, -1))],
    "trident": [((-0.8, 1), (-0.8, 0)), ((0.8, 1), (0.8, 0)), ((0, 1), (0, -1)), ((-0.8, 0), (0.8, 0))],
    "anchor": [((0, 1), (0, -0.9)), ((-0.5, 0.6), (0.5, 0.6)), ((-0.8, -0.4), (0, -0.9)), ((0.8, -0.4), (0, -0.9))],
}


@dataclass(frozen=True)
class ShapeSetSpec:
    num_classes: int = 6
    image_size: int = 16
    n_train: int = 3000
    n_test: int = 600
    max_shift: int = 2
    intensity_range: tuple = (0.8, 1.2)
    glyph_extent: float = 0.7
    clutter: float = 0.0

    def validate(self):
        if not 2 <= self.num_classes <= len(GLYPHS):
            raise ValueError(f"num_classes must lie in [2, {len(GLYPHS)}]")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.n_train < self.num_classes or self.n_test < self.num_classes:
            raise ValueError("need at least one sample per class in each split")
        if self.max_shift < 0 or self.clutter < 0:
            raise ValueError("max_shift and clutter must be nonnegative")


def render_glyph(name: str, size: int, extent: float = 0.7, width: float = None) -> np.ndarray:
    """Anti-aliased raster of one glyph on a ``size`` x ``size`` canvas."""
    width = width if width is not None else max(0.55, size / 16) * (2.0 / size)
    centers = (np.arange(size) + 0.5) / size * 2 - 1
    px, py = np.meshgrid(centers, -centers)
    img = np.zeros((size, size))
    for (x0, y0), (x1, y1) in GLYPHS[name]:
        a = np.array([x0, y0]) * extent
        b = np.array([x1, y1]) * extent
        ab = b - a
        t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / max(ab @ ab, 1e-12), 0, 1)
        d = np.hypot(px - a[0] - t * ab[0], py - a[1] - t * ab[1])
        img = np.maximum(img, np.clip(1.0 - (d - width / 2) / (2.0 / size), 0.0, 1.0))
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        img[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def _render_split(spec: ShapeSetSpec, n: int, rng: np.random.Generator):
    names = list(GLYPHS)[: spec.num_classes]
    bases = [render_glyph(nm, spec.image_size, spec.glyph_extent) for nm in names]
    labels = np.arange(n) % spec.num_classes
    labels = labels[rng.permutation(n)]
    shifts = rng.integers(-spec.max_shift, spec.max_shift + 1, size=(n, 2))
    gains = rng.uniform(*spec.intensity_range, size=n)
    imgs = np.stack([_shift(bases[y], dy, dx) * g for y, (dy, dx), g in zip(labels, shifts, gains)])
    if spec.clutter > 0:
        imgs = imgs + spec.clutter * rng.random(imgs.shape)
    return imgs[:, None], labels.astype(np.int64)


def generate_shapeset(spec: ShapeSetSpec = ShapeSetSpec(), seed: int = 0):
    """Class-balanced (up to N mod K) procedural glyph images.

    Returns ``(train, test)`` standardized with the training split's
    statistics.  Pure in ``(spec, seed)``.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 0x5A5E])
    xtr, ytr = _render_split(spec, spec.n_train, rng)
    xte, yte = _render_split(spec, spec.n_test, rng)
    mean, std = xtr.mean(), xtr.std()
    k = spec.num_classes
    return LabeledImages((xtr - mean) / std, ytr, k), LabeledImages((xte - mean) / std, yte, k)
