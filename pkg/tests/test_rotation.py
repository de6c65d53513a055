import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rdcr.rotation import expand_rotations, rotate90, unrotated_rows

images = st.integers(1, 6).flatmap(lambda s: arrays(np.float64, (2, s, s), elements=st.floats(-5, 5)))


def test_quarter_turn_hand_example():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = rotate90(np.array([[[a, b], [c, d]]]), 1)
    np.testing.assert_array_equal(out[0], [[b, d], [a, c]])


def test_pixel_convention(rng):
    x = rng.normal(size=(1, 3, 5))
    out = rotate90(x, 1)
    W = x.shape[2]
    for r in range(out.shape[1]):
        for c in range(out.shape[2]):
            assert out[0, r, c] == x[0, c, W - 1 - r]


def test_odd_turn_swaps_non_square_shape(rng):
    assert rotate90(rng.normal(size=(2, 3, 5)), 1).shape == (2, 5, 3)
    assert rotate90(rng.normal(size=(2, 3, 5)), 2).shape == (2, 3, 5)


@given(images, st.integers(0, 3))
def test_group_properties(x, k):
    assert rotate90(x, 0).tobytes() == x.tobytes()
    assert rotate90(rotate90(x, k), (4 - k) % 4).tobytes() == x.tobytes()
    y = x
    for _ in range(4):
        y = rotate90(y, 1)
    assert y.tobytes() == x.tobytes()
    # a permutation of pixels: the value multiset is unchanged
    np.testing.assert_array_equal(np.sort(rotate90(x, k).ravel()), np.sort(x.ravel()))


def test_rotate_rejects_bad_label(rng):
    with pytest.raises(ValueError):
        rotate90(rng.normal(size=(1, 2, 2)), 4)


def test_expand_two_images(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    out, labels = expand_rotations(x)
    assert out.shape == (8, 1, 4, 4)
    assert sorted(labels.tolist()) == [0, 0, 1, 1, 2, 2, 3, 3]
    np.testing.assert_array_equal(labels, [0, 1, 2, 3, 0, 1, 2, 3])
    assert out[unrotated_rows(2)].tobytes() == x.tobytes()
    for n in range(2):
        for k in range(4):
            np.testing.assert_array_equal(out[4 * n + k], rotate90(x[n], k))


@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_expand_preserves_intensity(n, s, seed):
    x = np.random.default_rng(seed).random((n, 2, s, s))
    out, _ = expand_rotations(x)
    assert np.isclose(out.sum(), 4 * x.sum(), rtol=1e-13)
    a, _ = expand_rotations(x)
    assert a.tobytes() == out.tobytes()


def test_expand_errors(rng):
    with pytest.raises(ValueError):
        expand_rotations(np.zeros((0, 1, 2, 2)))
    with pytest.raises(ValueError):
        expand_rotations(rng.normal(size=(2, 1, 2, 3)))
