"""Corrupt ShapeSet labels, audit the empirical transition, and show the rotation expansion."""
import numpy as np

from rdcr.data import ShapeSetSpec, generate_shapeset
from rdcr.noise import NoisyDataset, corrupt_labels, empirical_transition, symmetric_matrix
from rdcr.rotation import expand_rotations

train, _ = generate_shapeset(ShapeSetSpec(num_classes=6, image_size=8, n_train=3000, n_test=60), seed=0)
ds = NoisyDataset.from_clean(train.images, train.labels, train.num_classes)
T = symmetric_matrix(6, 0.8)
noisy = corrupt_labels(ds, T, seed=0)

np.set_printoptions(precision=3, suppress=True)
print("target transition:\n", T.rows)
print("empirical transition:\n", empirical_transition(noisy).rows)
print("corrupted fraction:", noisy.is_corrupted().mean())

x, rot = expand_rotations(train.images[:2])
print("expanded shape:", x.shape, "rotation labels:", rot)
for k in range(4):
    print(f"rotation {k}:")
    print((x[k, 0] > 0.5).astype(int))
