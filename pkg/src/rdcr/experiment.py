"""Config-driven runs: dataset construction, training, artifacts on disk."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .config import ConfigError, dump_config
from .data import LabeledImages, ShapeSetSpec, generate_shapeset, load_cifar
from .metrics import write_metrics_csv
from .nn import NetworkParams, NormalizationKind, build_backbone
from .noise import (NoisyDataset, TransitionMatrix, corrupt_labels, default_pairing, make_partitions,
                    pairwise_asymmetric_matrix, symmetric_matrix)
from .training import LossWeights, Schedule, TrainConfig, TrainingResult, run_training, save_checkpoint

log = logging.getLogger(__name__)

# offsets keep the per-stage random streams independent of each other
NOISE_SEED_OFFSET = 1_000
PARTITION_SEED_OFFSET = 2_000
INIT_SEED_OFFSET = 3_000


def load_source(cfg: dict[str, Any]) -> tuple[LabeledImages, LabeledImages]:
    src = cfg["dataset.source"]
    if src == "synthetic":
        spec = ShapeSetSpec(num_classes=cfg["dataset.synthetic.classes"],
                            image_size=cfg["dataset.synthetic.image_size"],
                            n_train=cfg["dataset.synthetic.n_train"],
                            n_test=cfg["dataset.synthetic.n_test"],
                            clutter=cfg["dataset.synthetic.clutter"])
        return generate_shapeset(spec, cfg["seed"])
    if not cfg["dataset.path"]:
        raise ConfigError(f"dataset.source = {src} needs dataset.path")
    return load_cifar(cfg["dataset.path"], src)


def noise_matrix(cfg: dict[str, Any], K: int) -> Optional[TransitionMatrix]:
    kind = cfg["noise.kind"]
    if kind == "symmetric":
        return symmetric_matrix(K, cfg["noise.symmetric.eps"], cfg["noise.symmetric.includes_self"])
    if kind == "asymmetric":
        raw = cfg["noise.asymmetric.pairing"]
        pairing = default_pairing(K) if raw in (None, "next") else [int(s) for s in raw.split(",")]
        if len(pairing) != K:
            raise ValueError(f"pairing lists {len(pairing)} targets for {K} classes")
        return pairwise_asymmetric_matrix(K, cfg["noise.asymmetric.eps"], pairing)
    return None


def build_dataset(cfg: dict[str, Any]) -> tuple[NoisyDataset, LabeledImages]:
    """Training set with noise and partitions applied, plus the clean test split."""
    train, test = load_source(cfg)
    ds = NoisyDataset.from_clean(train.images, train.labels, train.num_classes)
    T = noise_matrix(cfg, ds.K)
    if T is not None:
        ds = corrupt_labels(ds, T, cfg["seed"] + NOISE_SEED_OFFSET)
    semi = cfg["noise.kind"] == "semi_sl"
    ds = make_partitions(ds, "semi_sl" if semi else "simplified_nl",
                         cfg["noise.semi_sl.labels"] or 0, cfg["dataset.validation_fraction"],
                         cfg["seed"] + PARTITION_SEED_OFFSET)
    return ds, test


def build_model(cfg: dict[str, Any], in_channels: int, K: int) -> NetworkParams:
    norm = NormalizationKind.parse(cfg["model.norm"], cfg["model.group_size"])
    return build_backbone(in_channels, K, norm, cfg["model.width"], cfg["model.dropout"],
                          cfg["seed"] + INIT_SEED_OFFSET)


def _schedule(cfg, w: str) -> Schedule:
    return Schedule(cfg[f"weights.{w}.kind"], cfg[f"weights.{w}.start"], cfg[f"weights.{w}.end"],
                    cfg[f"weights.{w}.length"])


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        setting="semi_sl" if cfg["noise.kind"] == "semi_sl" else "simplified_nl",
        consistency=cfg["train.consistency"],
        weights=LossWeights(_schedule(cfg, "s"), _schedule(cfg, "c"), _schedule(cfg, "r")),
        rotation=cfg["train.rotation"],
        clip_threshold=cfg["train.clip_threshold"],
        lr=cfg["train.lr"],
        lr_floor=cfg["train.lr_floor"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        ema_decay=cfg["train.ema_decay"],
        ema_decay_late=cfg["train.ema_decay_late"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        labeled_batch_size=cfg["train.labeled_batch_size"],
        swa_pretrain_epochs=cfg["train.swa.pretrain_epochs"],
        swa_cycles=cfg["train.swa.cycles"],
        swa_cycle_length=cfg["train.swa.cycle_length"],
        captures_per_cycle=cfg["train.swa.captures_per_cycle"],
        augment_shift=cfg["train.augment.shift"],
        augment_flip=cfg["train.augment.flip"],
        input_noise=cfg["train.input_noise"],
        seed=cfg["seed"],
    )


def schedule_table(cfg: dict[str, Any]) -> list[tuple[int, float, float, float, float]]:
    """Per-epoch ``(epoch, lr, w_s, w_c, w_r)``."""
    tc = train_config(cfg)
    rows = []
    for e in range(tc.epochs):
        ws, wc, wr = tc.weights.at(e)
        rows.append((e, tc.lr_at(e), ws, wc, wr))
    return rows


@dataclass
class ExperimentResult:
    config: dict
    dataset: NoisyDataset
    test: LabeledImages
    training: TrainingResult


def run_experiment(cfg: dict[str, Any], out_dir=None, on_epoch=None) -> ExperimentResult:
    """Build everything from a resolved config, train, and optionally write artifacts.

    Artifacts: ``metrics.csv``, ``checkpoint-last.bin`` (student),
    ``checkpoint-teacher.bin``, ``checkpoint-best.bin`` (student at the best
    validation epoch), ``checkpoint-swa.bin`` (when SWA captured anything) and
    ``config-resolved``.
    """
    ds, test = build_dataset(cfg)
    params = build_model(cfg, ds.images.shape[1], ds.K)
    result = run_training(train_config(cfg), ds, params, (test.images, test.labels), on_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config-resolved").write_text(dump_config(cfg))
        write_metrics_csv(result.log, out / "metrics.csv")
        save_checkpoint(out / "checkpoint-last.bin", result.student)
        save_checkpoint(out / "checkpoint-teacher.bin", result.teacher.params)
        save_checkpoint(out / "checkpoint-best.bin", result.best_student or result.student)
        if result.swa.averaged_params is not None:
            save_checkpoint(out / "checkpoint-swa.bin", result.swa.averaged_params)
    return ExperimentResult(cfg, ds, test, result)
