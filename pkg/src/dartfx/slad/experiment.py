# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Experiment driver: configuration, run orchestration, metrics persistence and reports.

A run directory holds everything needed to understand and reproduce it::

    <root>/<run_id>/
        config.yaml         config snapshot, seed and code version
        metrics.jsonl       one MetricsRecord per line (no wall-clock, byte-stable)
        timing.jsonl        wall-clock per epoch
        summary.json        final scores, pass counts, checksums, status
        checkpoints/*.ckpt  initial, periodic and final model state
        cka_*.csv           when CKA analysis is requested
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
import csv
import io
import json
import logging
import os
from pathlib import Path
import time
from typing import Any, Iterable, Literal, Sequence

from jinja2 import Environment, FileSystemLoader
import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
import yaml

from .__about__ import __version__
from .checkpoint import checksum, load_checkpoint, save_checkpoint
from .cka import CkaSummary, cka_matrix, collect_features, delta_cka, mean_aligned_cka, probe_batch, write_cka_csv
from .data import DatasetDescriptor, TaskData, load_dataset
from .errors import ConfigurationError, DataError, NumericalError
from .heads import DistillConfig
from .lora import LoraAdapter, SharedAdapterView, SliceMode, create_adapters, make_shared_view
from .pretrain import PretrainConfig, load_encoder
from .tensor import parameter
from .training import (
    BlockMapping,
    EpochMetrics,
    OptimConfig,
    RunMetrics,
    TaskModel,
    TrainingHooks,
    block_mapping,
    build_task_model,
    distill_two_step,
    prepare_slad,
    train_adapt,
    train_probing,
    train_slad,
)
from .vit import DESK_STUDENT, DESK_TEACHER, EncoderConfig, resolve_preset

jinja_env = Environment(loader=FileSystemLoader(os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")))

OUTPUT_ROOT_ENV = "SLAD_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

Strategy = Literal["probe", "finetune", "lora", "distill-two-step", "slad"]
AdaptMode = Literal["probe", "lora", "full"]

# seed streams derived from the run seed, one per randomly initialized component
SEED_STREAMS = {"teacher_head": 11, "student_head": 12, "teacher_adapters": 21, "student_adapters": 22, "probe": 31}

SWEEP_DEFAULTS: dict[str, list] = {
    "mapping": ["first", "last", "even"],
    "rank": [2, 4, 8, 16],
    "temperature": [0.5, 1.0, 2.0, 4.0, 8.0],
    # (alpha_kl, alpha_t, alpha_s)
    "weights": [(1, 1, 1), (2, 1, 1), (1, 2, 2), (4, 1, 1), (2, 2, 1), (4, 2, 1)],
}


def derived_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([seed, SEED_STREAMS[stream]]).generate_state(1)[0])


class ExperimentConfig(BaseModel):
    """Everything a run needs. ``seed`` has no default and must be given."""

    name: str = "desk"
    strategy: Strategy = "slad"
    seed: int
    model: Literal["teacher", "student"] = "student"
    teacher: EncoderConfig = Field(default_factory=lambda: DESK_TEACHER.model_copy())
    student: EncoderConfig = Field(default_factory=lambda: DESK_STUDENT.model_copy())
    # encoder checkpoints written by `pretrain`; without them encoders start from init_seed
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None
    distill: DistillConfig | None = None
    teacher_mode: AdaptMode = "lora"
    student_mode: AdaptMode | None = None
    mapping: Literal["first", "last", "even"] = "even"
    rank: int = Field(default=16, ge=1)
    lora_alpha: float | None = None
    slice_mode: SliceMode = "per_segment"
    epochs: int = Field(default=10, ge=1)
    teacher_epochs: int | None = Field(default=None, ge=1)
    probe_distill_epochs: int = Field(default=26, ge=1)
    cls_blocks: int = Field(default=3, ge=1)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    dataset: DatasetDescriptor = Field(default_factory=DatasetDescriptor)
    output_dir: str | None = None
    checkpoint_every: int = Field(default=0, ge=0)
    cka: bool = False
    cka_probe_size: int = Field(default=256, ge=2)
    cka_token: Literal["cls", "mean"] = "cls"
    progress: bool = False

    @model_validator(mode="before")
    @classmethod
    def _fill_distill_defaults(cls, data):
        # a partial distill block inherits the strategy's weights, not the generic defaults
        if isinstance(data, dict) and isinstance(data.get("distill"), dict):
            base = DistillConfig.slad() if data.get("strategy", "slad") == "slad" else DistillConfig.two_step()
            data = {**data, "distill": {**base.model_dump(), **data["distill"]}}
        return data

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
        if self.cka and self.student.depth > self.teacher.depth:
            raise ConfigurationError(f"CKA output aligns student blocks to teacher blocks; student depth {self.student.depth} "
                                     f"exceeds teacher depth {self.teacher.depth}")
        if self.strategy == "slad":
            if self.student.depth > self.teacher.depth:
                raise ConfigurationError(f"student depth {self.student.depth} exceeds teacher depth {self.teacher.depth}")
            if self.student.dim > self.teacher.dim:
                raise ConfigurationError(f"student width {self.student.dim} exceeds teacher width {self.teacher.dim}")
        for cfg in self.adapted_encoders:
            if self.rank > cfg.dim:
                raise ConfigurationError(f"rank {self.rank} exceeds the width {cfg.dim} of {cfg.name}")

    @property
    def adapted_encoders(self) -> list[EncoderConfig]:
        """Encoders that receive their own LoRA adapters in this run."""
        if self.strategy == "lora":
            return [self.teacher if self.model == "teacher" else self.student]
        if self.strategy == "slad":
            return [self.teacher]
        if self.strategy == "distill-two-step":
            adapted = [self.teacher] if self.teacher_mode == "lora" else []
            return adapted + ([self.student] if self.resolved_student_mode == "lora" else [])
        return []

    @property
    def resolved_student_mode(self) -> AdaptMode:
        if self.student_mode is not None:
            return self.student_mode
        return "lora" if self.teacher_mode == "lora" else "full"

    @property
    def distill_config(self) -> DistillConfig:
        if self.distill is not None:
            return self.distill
        return DistillConfig.slad() if self.strategy == "slad" else DistillConfig.two_step()

    @property
    def distill_epochs(self) -> int:
        return self.probe_distill_epochs if self.teacher_mode == "probe" else self.epochs

    @property
    def method(self) -> str:
        if self.strategy == "distill-two-step":
            return f"distill-two-step-{self.teacher_mode}"
        return self.strategy

    @property
    def run_id(self) -> str:
        return f"{self.name}-{self.method}-seed{self.seed}"


class MetricsRecord(BaseModel):
    """One line of ``metrics.jsonl``."""

    run_id: str
    epoch: int
    phase: str
    split: Literal["train", "val", "test"]
    role: Literal["teacher", "student"]
    loss: float
    accuracy: float
    forward_passes: int = 0
    backward_passes: int = 0
    wall_clock: float | None = Field(default=None, exclude=True)


class MetricsWriter:
    """Append-only line-delimited records; every line is flushed as written."""

    def __init__(self, path: Path, timing_path: Path | None = None):
        self.path = path
        self.timing_path = timing_path
        self._last = time.perf_counter()

    def write(self, record: MetricsRecord) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(record.model_dump_json() + "\n")
            f.flush()
        if self.timing_path is not None and record.wall_clock is not None:
            with open(self.timing_path, "a", encoding="utf-8") as f:
                timing = {"run_id": record.run_id, "epoch": record.epoch, "phase": record.phase, "role": record.role,
                          "split": record.split, "elapsed_s": record.wall_clock}
                f.write(json.dumps(timing) + "\n")

    def epoch_hook(self, run_id: str):
        def on_epoch(m: EpochMetrics) -> None:
            now = time.perf_counter()
            elapsed, self._last = now - self._last, now
            self.write(MetricsRecord(run_id=run_id, epoch=m.epoch, phase=m.phase, split="train", role=m.role,
                                     loss=m.train_loss, accuracy=m.train_accuracy, forward_passes=m.forward_passes,
                                     backward_passes=m.backward_passes, wall_clock=elapsed))
            if m.val_loss is not None:
                self.write(MetricsRecord(run_id=run_id, epoch=m.epoch, phase=m.phase, split="val", role=m.role,
                                         loss=m.val_loss, accuracy=m.val_accuracy, forward_passes=m.forward_passes,
                                         backward_passes=m.backward_passes))
        return on_epoch


def read_metrics(path: str | os.PathLike) -> list[MetricsRecord]:
    """Load ``metrics.jsonl``; a partially written final line is dropped."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    records = []
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(MetricsRecord.model_validate_json(line))
        except ValidationError as exc:
            if index == len(lines) - 1:
                logging.warning(f"Ignoring partial final record in {path}")
                break
            raise DataError(f"corrupt metrics record on line {index + 1} of {path}") from exc
    return records


class RunResult(BaseModel):
    run_id: str
    run_dir: str
    status: int = 0
    summary: dict[str, Any] = Field(default_factory=dict)


def _format_validation_error(exc: ValidationError) -> str:
    return "; ".join(f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors())


def _set_dotted(target: dict, key: str, value) -> None:
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(target.get(part), dict):
            target[part] = {}
        target = target[part]
    target[parts[-1]] = value


def _read_yaml(path: str | os.PathLike | None, overrides: dict[str, Any] | None) -> dict:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config file {path} is not valid YAML", {"error": str(exc)}) from exc
        if not isinstance(raw, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, key, value)
    return raw


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML config and apply dotted-key overrides (``distill.temperature`` etc.)."""
    return validate_config(_read_yaml(path, overrides))


def validate_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error(exc)) from exc


def load_pretrain_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> PretrainConfig:
    try:
        return PretrainConfig.model_validate(_read_yaml(path, overrides))
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error(exc)) from exc


def resolve_output_root(cli_output: str | None = None, config: ExperimentConfig | None = None) -> Path:
    """``--output`` wins over the environment, which wins over the config's ``output_dir``."""
    if cli_output:
        return Path(cli_output)
    if os.environ.get(OUTPUT_ROOT_ENV):
        return Path(os.environ[OUTPUT_ROOT_ENV])
    if config is not None and config.output_dir:
        return Path(config.output_dir)
    return Path(DEFAULT_OUTPUT_ROOT)


def _model_tensors(prefix: str, model: TaskModel) -> dict[str, np.ndarray]:
    tensors = {f"{prefix}.encoder.{name}": t.data for name, t in model.encoder.named_parameters().items()}
    tensors.update({f"{prefix}.head.{name}": t.data for name, t in model.head.named_parameters().items()})
    for index, adapter in sorted(model.adapters.items()):
        if isinstance(adapter, LoraAdapter):
            tensors[f"{prefix}.adapters.{index}.A"] = adapter.A.data
            tensors[f"{prefix}.adapters.{index}.B"] = adapter.B.data
    return tensors


def _views_metadata(model: TaskModel) -> dict | None:
    views = {i: a for i, a in model.adapters.items() if isinstance(a, SharedAdapterView)}
    if not views:
        return None
    first = next(iter(views.values()))
    return {"parents": {str(i): v.parent.block for i, v in sorted(views.items())}, "slice_mode": first.slice_mode,
            "d_s": first.d_s, "d_t": first.d_t}


def save_models(path: Path, config: ExperimentConfig, teacher: TaskModel, student: TaskModel, epoch: int | None) -> Path:
    tensors = {**_model_tensors("teacher", teacher), **_model_tensors("student", student)}
    metadata = {"run_id": config.run_id, "strategy": config.strategy, "epoch": epoch, "code_version": __version__,
                "teacher": config.teacher.model_dump(), "student": config.student.model_dump(),
                "num_classes": teacher.num_classes, "cls_blocks": config.cls_blocks,
                "lora_alpha": config.lora_alpha, "student_views": _views_metadata(student)}
    return save_checkpoint(path, tensors, metadata)


def _restore_model(prefix: str, tensors: dict[str, np.ndarray], metadata: dict) -> TaskModel:
    cfg = EncoderConfig.model_validate(metadata[prefix])
    model = build_task_model(cfg, metadata["num_classes"], prefix, cls_blocks=metadata["cls_blocks"])
    model.encoder.load_state_dict({k[len(f"{prefix}.encoder."):]: v for k, v in tensors.items() if k.startswith(f"{prefix}.encoder.")})
    model.head.load_state_dict({k[len(f"{prefix}.head."):]: v for k, v in tensors.items() if k.startswith(f"{prefix}.head.")})
    blocks = sorted({int(k.split(".")[2]) for k in tensors if k.startswith(f"{prefix}.adapters.")})
    for index in blocks:
        A = parameter(tensors[f"{prefix}.adapters.{index}.A"].copy(), name="lora.qkv.A")
        B = parameter(tensors[f"{prefix}.adapters.{index}.B"].copy(), name="lora.qkv.B")
        model.adapters[index] = LoraAdapter(A, B, site="qkv", block=index, alpha=metadata.get("lora_alpha"))
    return model


def restore_models(path: str | os.PathLike) -> tuple[TaskModel, TaskModel, dict]:
    """Rebuild teacher and student (adapters and shared views included) from a checkpoint."""
    tensors, metadata = load_checkpoint(path)
    teacher = _restore_model("teacher", tensors, metadata)
    student = _restore_model("student", tensors, metadata)
    views = metadata.get("student_views")
    if views:
        for index, parent in views["parents"].items():
            student.adapters[int(index)] = make_shared_view(teacher.adapters[parent], views["d_s"], views["d_t"], views["slice_mode"])
    return teacher, student, metadata


def _encoder_checksums(teacher: TaskModel, student: TaskModel) -> dict[str, str]:
    return {"teacher": checksum(teacher.encoder.state_dict()), "student": checksum(student.encoder.state_dict())}


def _cka_mapping(config: ExperimentConfig) -> BlockMapping:
    if config.student.depth > config.teacher.depth:
        raise ConfigurationError(f"CKA alignment needs a student no deeper than its teacher, got {config.student.depth} > {config.teacher.depth}")
    return block_mapping(config.mapping, config.student.depth, config.teacher.depth)


def compute_cka(teacher: TaskModel, student: TaskModel, data: TaskData, config: ExperimentConfig):
    probe, descriptor = probe_batch(data, config.cka_probe_size, derived_seed(config.seed, "probe"))
    t_feats = collect_features(teacher, probe.images, config.cka_token)
    s_feats = collect_features(student, probe.images, config.cka_token)
    return cka_matrix(t_feats, s_feats, descriptor, teacher.config.name, student.config.name, config.cka_token)


def write_cka_outputs(run_dir: Path, before, after, config: ExperimentConfig) -> CkaSummary:
    mapping = _cka_mapping(config)
    delta = delta_cka(before, after)
    write_cka_csv(run_dir / "cka_before.csv", before)
    write_cka_csv(run_dir / "cka_after.csv", after)
    write_cka_csv(run_dir / "delta_cka.csv", delta)
    g = mapping.g
    summary = CkaSummary(probe=before.probe, token=config.cka_token, mapping=g,
                         mean_aligned_before=mean_aligned_cka(before, mapping), mean_aligned_after=mean_aligned_cka(after, mapping),
                         mean_aligned_delta=float(np.mean([delta[g[j], j] for j in range(delta.shape[1])])))
    (run_dir / "cka_summary.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logging.info(f"CKA mean aligned: before={summary.mean_aligned_before:.4f} after={summary.mean_aligned_after:.4f} "
                 f"delta={summary.mean_aligned_delta:.4f}")
    return summary


def _execute(config: ExperimentConfig, teacher: TaskModel, student: TaskModel, data: TaskData, hooks_for) -> RunMetrics:
    optim = config.optim
    seed = config.seed
    if config.strategy in ("probe", "finetune", "lora"):
        model = teacher if config.model == "teacher" else student
        if config.strategy == "probe":
            metrics, _ = train_probing(model, data, config.epochs, optim, seed, hooks_for(0))
            return metrics
        mode = "full" if config.strategy == "finetune" else "lora"
        if mode == "lora":
            model.adapters = create_adapters(model.config.dim, model.config.depth, config.rank,
                                             derived_seed(seed, f"{config.model}_adapters"), alpha=config.lora_alpha)
        return train_adapt(model, data, config.epochs, mode, optim, seed, hooks_for(0))
    if config.strategy == "distill-two-step":
        teacher_epochs = config.teacher_epochs or config.epochs
        if config.teacher_mode == "lora":
            teacher.adapters = create_adapters(teacher.config.dim, teacher.config.depth, config.rank,
                                               derived_seed(seed, "teacher_adapters"), alpha=config.lora_alpha)
        first = train_adapt(teacher, data, teacher_epochs, config.teacher_mode, optim, seed, hooks_for(0))
        student_mode = config.resolved_student_mode
        if student_mode == "lora":
            student.adapters = create_adapters(student.config.dim, student.config.depth, config.rank,
                                               derived_seed(seed, "student_adapters"), alpha=config.lora_alpha)
        second = distill_two_step(teacher, student, data, config.distill_epochs, config.distill_config, student_mode,
                                  optim, seed, hooks_for(teacher_epochs))
        return first.merge(second, strategy=config.method)
    mapping = block_mapping(config.mapping, student.config.depth, teacher.config.depth)
    teacher.adapters, student.adapters = prepare_slad(teacher.encoder, student.encoder, config.rank, mapping,
                                                      derived_seed(seed, "teacher_adapters"), config.lora_alpha, config.slice_mode)
    return train_slad(teacher, student, data, config.epochs, mapping, config.distill_config, optim, seed, hooks_for(0))


def _prepare_run_dir(run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("metrics.jsonl", "timing.jsonl", "summary.json"):
        if (run_dir / stale).exists():
            logging.warning(f"Overwriting previous {stale} in {run_dir}")
            (run_dir / stale).unlink()
    checkpoints = run_dir / "checkpoints"
    if checkpoints.is_dir():
        for old in checkpoints.glob("*.ckpt"):
            old.unlink()


def run(config: ExperimentConfig, output_root: str | os.PathLike | None = None) -> RunResult:
    """Execute one configured experiment and write its run directory.

    Returns status 0 on success and 2 when training diverged (non-finite loss or
    gradients); in that case the latest checkpoint written before the failure is kept.
    """
    root = Path(output_root) if output_root is not None else resolve_output_root(config=config)
    run_dir = root / config.run_id
    teacher_encoder = load_encoder(config.teacher_checkpoint, config.teacher) if config.teacher_checkpoint else None
    student_encoder = load_encoder(config.student_checkpoint, config.student) if config.student_checkpoint else None
    _prepare_run_dir(run_dir)
    snapshot = {"code_version": __version__, **config.model_dump(mode="json")}
    with open(run_dir / "config.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(snapshot, f, sort_keys=False)
    logging.info(f"Run {config.run_id}: strategy={config.strategy} seed={config.seed} -> {run_dir}")

    data = load_dataset(config.dataset)
    classes = data.descriptor.num_classes
    teacher = build_task_model(config.teacher, classes, "teacher", derived_seed(config.seed, "teacher_head"), config.cls_blocks, teacher_encoder)
    student = build_task_model(config.student, classes, "student", derived_seed(config.seed, "student_head"), config.cls_blocks, student_encoder)
    cka_before = compute_cka(teacher, student, data, config) if config.cka else None

    checkpoint_dir = run_dir / "checkpoints"
    last_checkpoint = save_models(checkpoint_dir / "initial.ckpt", config, teacher, student, None)
    initial_checksums = _encoder_checksums(teacher, student)
    writer = MetricsWriter(run_dir / "metrics.jsonl", run_dir / "timing.jsonl")

    def save_periodic(epoch: int) -> None:
        nonlocal last_checkpoint
        last_checkpoint = save_models(checkpoint_dir / f"epoch_{epoch:04d}.ckpt", config, teacher, student, epoch)

    def hooks_for(offset: int) -> TrainingHooks:
        return TrainingHooks(on_epoch=writer.epoch_hook(config.run_id), checkpoint=save_periodic,
                             checkpoint_every=config.checkpoint_every, progress=config.progress, epoch_offset=offset)

    summary: dict[str, Any] = {"run_id": config.run_id, "name": config.name, "strategy": config.strategy, "method": config.method,
                               "model": config.model, "seed": config.seed, "dataset": data.descriptor.label,
                               "teacher": config.teacher.name, "student": config.student.name, "code_version": __version__,
                               "initial_encoders": {"teacher": config.teacher_checkpoint or f"init_seed={config.teacher.init_seed}",
                                                    "student": config.student_checkpoint or f"init_seed={config.student.init_seed}"}}
    try:
        metrics = _execute(config, teacher, student, data, hooks_for)
    except NumericalError as exc:
        logging.error(f"Run {config.run_id} diverged: {exc}; keeping {last_checkpoint.name}")
        summary.update({"status": "diverged", "error": str(exc), "last_checkpoint": last_checkpoint.name})
        _write_json(run_dir / "summary.json", summary)
        return RunResult(run_id=config.run_id, run_dir=str(run_dir), status=2, summary=summary)

    last_epoch = max((m.epoch for m in metrics.history), default=0)
    for role, accuracy in sorted(metrics.test_accuracy.items()):
        counts = metrics.passes.get(role)
        writer.write(MetricsRecord(run_id=config.run_id, epoch=last_epoch, phase="final", split="test", role=role,
                                   loss=metrics.test_loss[role], accuracy=accuracy,
                                   forward_passes=counts.forward if counts else 0, backward_passes=counts.backward if counts else 0))
    save_models(checkpoint_dir / "final.ckpt", config, teacher, student, last_epoch)
    summary.update({
        "status": "ok",
        "test_accuracy": metrics.test_accuracy,
        "passes": {role: counts.model_dump() for role, counts in sorted(metrics.passes.items())},
        "forward_passes": metrics.forward_passes,
        "backward_passes": metrics.backward_passes,
        "total_passes": metrics.total_passes,
        "wall_clock": metrics.wall_clock,
        "encoder_checksums": {"initial": initial_checksums, "final": _encoder_checksums(teacher, student)},
    })
    if cka_before is not None:
        cka_after = compute_cka(teacher, student, data, config)
        summary["cka"] = write_cka_outputs(run_dir, cka_before, cka_after, config).model_dump()
    _write_json(run_dir / "summary.json", summary)
    logging.info(f"Run {config.run_id} finished: test accuracy {metrics.test_accuracy}, {metrics.total_passes} sample passes, "
                 f"{metrics.wall_clock:.1f}s")
    return RunResult(run_id=config.run_id, run_dir=str(run_dir), summary=summary)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def analyze_run(run_dir: str | os.PathLike, probe_size: int | None = None, token: str | None = None) -> CkaSummary:
    """Recompute the before/after CKA tables of a finished run from its initial and final checkpoints."""
    run_dir = Path(run_dir)
    config_path = run_dir / "config.yaml"
    if not config_path.is_file() or not (run_dir / "checkpoints" / "final.ckpt").is_file():
        raise DataError(f"{run_dir} is not a finished run directory")
    with open(config_path, encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    raw.pop("code_version", None)
    if probe_size is not None:
        raw["cka_probe_size"] = probe_size
    if token is not None:
        raw["cka_token"] = token
    config = validate_config(raw)
    _cka_mapping(config)
    data = load_dataset(config.dataset)
    before_teacher, before_student, _ = restore_models(run_dir / "checkpoints" / "initial.ckpt")
    after_teacher, after_student, _ = restore_models(run_dir / "checkpoints" / "final.ckpt")
    before = compute_cka(before_teacher, before_student, data, config)
    after = compute_cka(after_teacher, after_student, data, config)
    return write_cka_outputs(run_dir, before, after, config)


def _run_job(payload: tuple[dict, str | None]) -> RunResult:
    raw, output_root = payload
    return run(ExperimentConfig.model_validate(raw), output_root)


def run_many(configs: Sequence[ExperimentConfig], output_root: str | os.PathLike | None = None, jobs: int = 1) -> list[RunResult]:
    """Run independent configs, in separate processes when ``jobs > 1``."""
    root = str(output_root) if output_root is not None else None
    payloads = [(c.model_dump(mode="json"), root) for c in configs]
    if jobs <= 1 or len(configs) <= 1:
        return [_run_job(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, payloads))


def run_seeds(config: ExperimentConfig, seeds: Iterable[int] = (0, 1, 2), output_root=None, jobs: int = 1) -> list[RunResult]:
    return run_many([config.model_copy(update={"seed": s}) for s in seeds], output_root, jobs)


def sweep_variant(config: ExperimentConfig, param: str, value) -> ExperimentConfig:
    """Copy of ``config`` with one ablation knob set; the run name records the setting."""
    if param == "mapping":
        update, label = {"mapping": value}, str(value)
    elif param == "rank":
        update, label = {"rank": int(value)}, f"r{int(value)}"
    elif param == "temperature":
        update, label = {"distill": config.distill_config.model_copy(update={"temperature": float(value)})}, f"T{float(value):g}"
    elif param == "weights":
        alpha_kl, alpha_t, alpha_s = (float(v) for v in value)
        update = {"distill": config.distill_config.model_copy(update={"alpha_kl": alpha_kl, "alpha_t": alpha_t, "alpha_s": alpha_s})}
        label = f"w{alpha_kl:g}-{alpha_t:g}-{alpha_s:g}"
    else:
        raise ConfigurationError(f"unknown sweep parameter '{param}'", {"allowed": sorted(SWEEP_DEFAULTS)})
    variant = config.model_copy(update={**update, "name": f"{config.name}-{label}"})
    return validate_config(variant.model_dump(mode="json"))


def sweep_label(param: str, value) -> str:
    if param == "weights":
        return "(" + ", ".join(f"{float(v):g}" for v in value) + ")"
    return f"{value:g}" if isinstance(value, float) else str(value)


class AblationRow(BaseModel):
    setting: str
    student_accuracy: float | None = None
    teacher_accuracy: float | None = None
    seeds: int = 0


def run_sweep(config: ExperimentConfig, param: str, values: Sequence | None = None, seeds: Iterable[int] = (0,),
              output_root=None, jobs: int = 1) -> list[AblationRow]:
    values = list(values) if values is not None else list(SWEEP_DEFAULTS.get(param, []))
    if not values:
        raise ConfigurationError(f"no values to sweep for '{param}'")
    variants = [sweep_variant(config, param, v) for v in values]
    seeds = list(seeds)
    results = run_many([v.model_copy(update={"seed": s}) for v in variants for s in seeds], output_root, jobs)
    rows = []
    for i, value in enumerate(values):
        chunk = [r for r in results[i * len(seeds):(i + 1) * len(seeds)] if r.status == 0]
        student = [r.summary["test_accuracy"].get("student") for r in chunk if "student" in r.summary["test_accuracy"]]
        teacher = [r.summary["test_accuracy"].get("teacher") for r in chunk if "teacher" in r.summary["test_accuracy"]]
        rows.append(AblationRow(setting=sweep_label(param, value), seeds=len(chunk),
                                student_accuracy=100.0 * float(np.mean(student)) if student else None,
                                teacher_accuracy=100.0 * float(np.mean(teacher)) if teacher else None))
    return rows


def render_ablation(param: str, rows: Sequence[AblationRow], fmt: Literal["csv", "markdown"] = "markdown") -> str:
    if fmt == "markdown":
        return jinja_env.get_template("ablation.md.j2").render(param=param, rows=rows)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([param, "student_accuracy", "teacher_accuracy", "seeds"])
    for row in rows:
        writer.writerow([row.setting, _fmt(row.student_accuracy), _fmt(row.teacher_accuracy), row.seeds])
    return buffer.getvalue()


class ReportRow(BaseModel):
    student: str
    teacher: str
    method: str
    accuracy: dict[str, float | None] = Field(default_factory=dict)
    teacher_accuracy: float | None = None
    wall_clock: float | None = None
    passes: float | None = None
    delta_cka: float | None = None
    seeds: int = 0


class Report(BaseModel):
    datasets: list[str]
    rows: list[ReportRow]
    absent: list[str] = Field(default_factory=list)


def _fmt(value: float | None, digits: int = 2) -> str:
    return "" if value is None else f"{value:.{digits}f}"


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def collect_report(run_dirs: Iterable[str | os.PathLike]) -> Report:
    """Group finished runs by (student, teacher, method); seeds are averaged, datasets become columns."""
    groups: dict[tuple[str, str, str], list[dict]] = {}
    absent = []
    for run_dir in run_dirs:
        path = Path(run_dir) / "summary.json"
        if not path.is_file():
            logging.warning(f"Run {run_dir} has no summary; listing it as absent")
            absent.append(str(run_dir))
            continue
        summary = json.loads(path.read_text(encoding="utf-8"))
        if summary.get("status") != "ok":
            absent.append(str(run_dir))
            continue
        if summary["strategy"] in ("probe", "finetune", "lora"):
            key = (summary["student"], "-", summary["method"]) if summary["model"] == "student" else ("-", summary["teacher"], summary["method"])
        else:
            key = (summary["student"], summary["teacher"], summary["method"])
        groups.setdefault(key, []).append(summary)
    datasets = sorted({s["dataset"] for group in groups.values() for s in group})
    rows = []
    for (student, teacher, method), summaries in sorted(groups.items(), key=lambda item: (item[0][2], item[0][0], item[0][1])):
        accuracy = {}
        for dataset in datasets:
            values = [s["test_accuracy"].get("student", s["test_accuracy"].get("teacher"))
                      for s in summaries if s["dataset"] == dataset]
            values = [v for v in values if v is not None]
            accuracy[dataset] = 100.0 * _mean(values) if values else None
        teacher_values = [s["test_accuracy"]["teacher"] for s in summaries if "teacher" in s["test_accuracy"]]
        deltas = [s["cka"]["mean_aligned_delta"] for s in summaries if "cka" in s]
        rows.append(ReportRow(student=student, teacher=teacher, method=method, accuracy=accuracy,
                              teacher_accuracy=100.0 * _mean(teacher_values) if teacher_values else None,
                              wall_clock=_mean([s["wall_clock"] for s in summaries]),
                              passes=_mean([s["total_passes"] for s in summaries]),
                              delta_cka=_mean(deltas), seeds=len(summaries)))
    return Report(datasets=datasets, rows=rows, absent=absent)


def render_report(report: Report, fmt: Literal["csv", "markdown"] = "csv") -> str:
    if fmt == "markdown":
        return jinja_env.get_template("report.md.j2").render(report=report, fmt=_fmt)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["student", "teacher", "method", *report.datasets, "teacher_accuracy", "wall_clock_s", "passes", "delta_cka", "seeds"])
    for row in report.rows:
        writer.writerow([row.student, row.teacher, row.method, *(_fmt(row.accuracy.get(d)) for d in report.datasets),
                         _fmt(row.teacher_accuracy), _fmt(row.wall_clock), _fmt(row.passes, 0), _fmt(row.delta_cka, 6), row.seeds])
    for missing in report.absent:
        writer.writerow(["absent", missing])
    return buffer.getvalue()


def report(run_dirs: Iterable[str | os.PathLike], fmt: Literal["csv", "markdown"] = "csv") -> str:
    return render_report(collect_report(run_dirs), fmt)
