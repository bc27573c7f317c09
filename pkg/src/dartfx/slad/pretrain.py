# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Source-task pretraining of an aligned teacher/student encoder pair.

The teacher encoder is fully trained on a synthetic source task, then the student
encoder is distilled from it on the same task. Only the encoders are kept: the
source heads are discarded and downstream runs start from the saved encoder
checkpoints (``teacher_checkpoint`` / ``student_checkpoint`` in a run config)::

    <out_dir>/
        teacher.ckpt     teacher encoder
        student.ckpt     student encoder
        pretrain.json    source scores, pass counts, checksums, pair CKA
"""
from __future__ import annotations

import json
import logging
import os
from pathlib import Path

from pydantic import BaseModel, Field, field_validator

from .__about__ import __version__
from .checkpoint import checksum, load_checkpoint, save_checkpoint
from .cka import cka_matrix, collect_features, mean_aligned_cka, probe_batch
from .data import DatasetDescriptor, load_dataset
from .errors import ConfigurationError, DataError
from .heads import DistillConfig
from .training import OptimConfig, RunMetrics, TrainingHooks, block_mapping, build_task_model, distill_two_step, train_adapt
from .vit import DESK_STUDENT, DESK_TEACHER, Encoder, EncoderConfig, resolve_preset

ENCODER_KIND = "encoder"
# architecture fields that must agree between a checkpoint and the encoder it initializes
ARCHITECTURE = ("depth", "dim", "heads", "patch_size", "image_size", "channels", "mlp_ratio")


def source_task() -> DatasetDescriptor:
    """Default source task: more classes than the downstream default and its own texture seed."""
    return DatasetDescriptor(name="source20", num_classes=20, per_class=100, test_per_class=10, seed=1000)


class PretrainConfig(BaseModel):
    name: str = "desk"
    seed: int = 0
    teacher: EncoderConfig = Field(default_factory=lambda: DESK_TEACHER.model_copy())
    student: EncoderConfig = Field(default_factory=lambda: DESK_STUDENT.model_copy())
    dataset: DatasetDescriptor = Field(default_factory=source_task)
    teacher_epochs: int = Field(default=8, ge=1)
    student_epochs: int = Field(default=8, ge=1)
    cls_blocks: int = Field(default=3, ge=1)
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(finetune_lr=5e-4))
    distill: DistillConfig = Field(default_factory=DistillConfig.two_step)
    cka_probe_size: int = Field(default=256, ge=2)

    @field_validator("teacher", "student", mode="before")
    @classmethod
    def _resolve_preset(cls, value):
        return resolve_preset(value)

    def model_post_init(self, __context):
        for role, cfg in (("teacher", self.teacher), ("student", self.student)):
            if cfg.image_size != self.dataset.image_size:
                raise ConfigurationError(f"{role} encoder expects {cfg.image_size}px images, dataset provides {self.dataset.image_size}px")
            if self.cls_blocks > cfg.depth:
                raise ConfigurationError(f"cls_blocks={self.cls_blocks} exceeds {role} depth {cfg.depth}")


def save_encoder(path: str | os.PathLike, encoder: Encoder, metadata: dict | None = None) -> Path:
    return save_checkpoint(path, encoder.state_dict(), {**(metadata or {}), "kind": ENCODER_KIND, "encoder": encoder.config.model_dump()})


def load_encoder(path: str | os.PathLike, config: EncoderConfig | None = None) -> Encoder:
    """Build an encoder from an encoder checkpoint.

    With ``config`` the architecture must match the stored one; the returned encoder
    carries ``config`` (its name and presets) and the stored weights.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"encoder checkpoint not found: {path}")
    tensors, metadata = load_checkpoint(path)
    if metadata.get("kind") != ENCODER_KIND or "encoder" not in metadata:
        raise DataError(f"{path} does not hold a single encoder", {"kind": metadata.get("kind")})
    stored = EncoderConfig.model_validate(metadata["encoder"])
    if config is not None:
        mismatched = {f: (getattr(stored, f), getattr(config, f)) for f in ARCHITECTURE if getattr(stored, f) != getattr(config, f)}
        if mismatched:
            raise ConfigurationError(f"encoder checkpoint {path} does not fit {config.name}",
                                     {field: f"stored {a}, configured {b}" for field, (a, b) in mismatched.items()})
    encoder = Encoder(config or stored)
    encoder.load_state_dict(tensors)
    logging.info(f"Loaded encoder {encoder.config.name} from {path}")
    return encoder


def pretrain_pair(config: PretrainConfig, hooks: TrainingHooks | None = None) -> tuple[Encoder, Encoder, RunMetrics, float | None]:
    """Train the teacher on the source task, distill the student from it.

    Returns both encoders, the merged metrics and the mean aligned CKA of the pair on
    source probe images (``None`` when the student is deeper than the teacher).
    """
    data = load_dataset(config.dataset)
    classes = data.descriptor.num_classes
    teacher = build_task_model(config.teacher, classes, "teacher", seed=config.seed, cls_blocks=config.cls_blocks)
    student = build_task_model(config.student, classes, "student", seed=config.seed + 1, cls_blocks=config.cls_blocks)
    logging.info(f"Pretraining {config.teacher.name} -> {config.student.name} on {data.descriptor.label}")
    first = train_adapt(teacher, data, config.teacher_epochs, "full", config.optim, config.seed, hooks)
    second = distill_two_step(teacher, student, data, config.student_epochs, config.distill, "full", config.optim, config.seed, hooks)
    metrics = first.merge(second, strategy="pretrain")

    aligned = None
    if config.student.depth <= config.teacher.depth:
        probe, descriptor = probe_batch(data, config.cka_probe_size, config.seed)
        matrix = cka_matrix(collect_features(teacher, probe.images), collect_features(student, probe.images), descriptor,
                            config.teacher.name, config.student.name)
        aligned = mean_aligned_cka(matrix, block_mapping("even", config.student.depth, config.teacher.depth))
    return teacher.encoder, student.encoder, metrics, aligned


def write_pretrained(config: PretrainConfig, out_dir: str | os.PathLike, hooks: TrainingHooks | None = None) -> dict:
    out_dir = Path(out_dir)
    teacher, student, metrics, aligned = pretrain_pair(config, hooks)
    metadata = {"source": config.dataset.label, "seed": config.seed, "code_version": __version__}
    save_encoder(out_dir / "teacher.ckpt", teacher, metadata)
    save_encoder(out_dir / "student.ckpt", student, metadata)
    summary = {
        "name": config.name,
        "seed": config.seed,
        "source": config.dataset.label,
        "teacher": config.teacher.name,
        "student": config.student.name,
        "test_accuracy": metrics.test_accuracy,
        "mean_aligned_cka": aligned,
        "total_passes": metrics.total_passes,
        "wall_clock": metrics.wall_clock,
        "checksums": {"teacher": checksum(teacher.state_dict()), "student": checksum(student.state_dict())},
        "config": config.model_dump(mode="json"),
    }
    (out_dir / "pretrain.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    cka_text = "n/a" if aligned is None else f"{aligned:.4f}"
    logging.info(f"Pretrained pair written to {out_dir}: accuracy {metrics.test_accuracy}, aligned CKA {cka_text}")
    return summary
