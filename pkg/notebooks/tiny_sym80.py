"""Train CE, MT and RD-MT on 80%-noise ShapeSet at desk scale and compare best/last accuracy.

Each run takes several minutes on one core. Pass a seed as the first argument.
"""
import sys

from rdcr.config import preset, resolve
from rdcr.metrics import best_last
from rdcr.experiment import run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
base = preset("sym80", "tiny")
variants = {
    "CE": {"weights.c.end": 0.0, "weights.r.kind": "constant", "weights.r.start": 0.0,
           "weights.s.kind": "constant", "train.rotation": False},
    "MT": {"weights.r.kind": "constant", "weights.r.start": 0.0, "train.rotation": False},
    "RD-MT": {},
}
for name, over in variants.items():
    cfg = resolve({**base, **over, "seed": seed})
    res = run_experiment(cfg).training
    role = "student" if name == "CE" else "teacher"
    best, last = best_last(res.log, role)
    print(f"{name:6s} best {best:5.1f}  last {last:5.1f}  gap {best - last:5.1f}  "
          f"pseudo-label acc {res.log[-1].pseudo_acc:5.1f}")
