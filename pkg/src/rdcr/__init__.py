"""Rotational-decoupling consistency regularization on a small numpy autodiff stack."""
from .autodiff import NonFiniteError, Tensor, backward, no_grad
from .config import ConfigError, load_config, preset, resolve
from .data import LabeledImages, ShapeSetSpec, generate_shapeset, load_cifar
from .experiment import build_dataset, run_experiment
from .metrics import METRICS_COLUMNS, MetricsRecord, best_last, pseudo_confusion
from .nn import NetworkParams, NormalizationKind, build_backbone, forward
from .noise import (NoisyDataset, TransitionMatrix, corrupt_labels, make_partitions,
                    pairwise_asymmetric_matrix, symmetric_matrix)
from .rotation import expand_rotations, rotate90
from .training import (DivergenceError, LossWeights, Schedule, TrainConfig, load_checkpoint, rdcr_loss,
                       run_training, save_checkpoint)

__version__ = "0.1.0"
