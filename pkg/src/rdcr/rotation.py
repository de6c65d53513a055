"""Self-supervised rotation targets.

Label k means k counter-clockwise quarter turns: 0 -> 0, 1 -> 90, 2 -> 180,
3 -> 270 degrees.  One quarter turn maps output pixel (r, c) to source pixel
(c, W - 1 - r).
"""
from __future__ import annotations

import numpy as np

ANGLES = (0, 90, 180, 270)


def rotate90(image: np.ndarray, k: int) -> np.ndarray:
    """Rotate a (C, H, W) image by ``k`` counter-clockwise quarter turns."""
    if not 0 <= k < 4:
        raise ValueError(f"rotation label must be in [0, 4), got {k}")
    return np.rot90(image, k, axes=(-2, -1)).copy()


def expand_rotations(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Four rotated copies per image, source-major then label-minor.

    Output index ``4 * n + k`` holds image ``n`` rotated by ``k``; so rows
    ``0::4`` are the un-rotated originals.
    """
    images = np.asarray(images)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"expected a non-empty (N, C, H, W) batch, got shape {images.shape}")
    if images.shape[2] != images.shape[3]:
        raise ValueError("rotation expansion needs square images to keep a fixed shape")
    out = np.stack([np.rot90(images, k, axes=(2, 3)) for k in range(4)], axis=1)
    n = len(images)
    return out.reshape(4 * n, *images.shape[1:]), np.tile(np.arange(4), n)


def unrotated_rows(n: int) -> np.ndarray:
    """Row indices of the un-rotated copies in an expanded batch of ``n`` sources."""
    return np.arange(n) * 4
