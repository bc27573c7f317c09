# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Adaptation strategies and the optimizer/schedule machinery they share.

Five procedures are provided: linear probing, LoRA and full fine-tuning of a single
model, two-step distillation from an already adapted teacher, and SLAD, where teacher
and student are trained in one stage with the student reading width-sliced views of
the teacher's adapters.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import time
from typing import Callable, Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from .data import Split, TaskData, epoch_rng, iterate_batches
from .errors import ConfigurationError, NumericalError, UsageError
from .heads import DistillConfig, MlpHead, cross_entropy, kd_loss, slad_loss
from .lora import AdapterLike, LoraAdapter, SharedAdapterView, SliceMode, create_adapters, make_shared_view
from .tensor import Tensor, backward, no_grad, zero_grads
from .vit import Encoder, EncoderConfig, encoder_forward, extract_cls_concat

Role = Literal["teacher", "student"]


class BlockMapping(BaseModel):
    """Injective, increasing assignment ``g`` of student blocks to teacher blocks."""

    kind: Literal["first", "last", "even"]
    student_depth: int = Field(ge=1)
    teacher_depth: int = Field(ge=1)
    g: list[int]

    def model_post_init(self, __context):
        if len(self.g) != self.student_depth:
            raise ConfigurationError(f"mapping has {len(self.g)} entries for {self.student_depth} student blocks")
        if any(b <= a for a, b in zip(self.g, self.g[1:])):
            raise ConfigurationError("mapping must be strictly increasing", {"g": self.g})
        if self.g and (self.g[0] < 0 or self.g[-1] >= self.teacher_depth):
            raise ConfigurationError(f"mapping range exceeds teacher depth {self.teacher_depth}", {"g": self.g})

    def __call__(self, i: int) -> int:
        return self.g[i]

    def pairs(self) -> list[tuple[int, int]]:
        """``(teacher_block, student_block)`` pairs."""
        return [(t, s) for s, t in enumerate(self.g)]


def block_mapping(kind: str, n_s: int, n_t: int) -> BlockMapping:
    """First: ``g(i)=i``; Last: ``g(i)=n_t-n_s+i``; Even: ``g(i)=round(i*n_t/n_s)``, halves rounded down."""
    kind = kind.lower()
    if n_s > n_t:
        raise ConfigurationError(f"student depth {n_s} exceeds teacher depth {n_t}")
    if kind == "first":
        g = list(range(n_s))
    elif kind == "last":
        g = [n_t - n_s + i for i in range(n_s)]
    elif kind == "even":
        g = []
        for i in range(n_s):
            quotient, remainder = divmod(i * n_t, n_s)
            g.append(quotient + 1 if 2 * remainder > n_s else quotient)
    else:
        raise ConfigurationError(f"unknown mapping kind '{kind}'", {"allowed": ["first", "last", "even"]})
    return BlockMapping(kind=kind, student_depth=n_s, teacher_depth=n_t, g=g)


class OptimConfig(BaseModel):
    lr: float = Field(default=1e-3, gt=0)
    finetune_lr: float = Field(default=1e-4, gt=0)
    weight_decay: float = Field(default=0.05, ge=0)
    batch_size: int = Field(default=64, ge=1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def audit_storage(params: Sequence[Tensor]) -> None:
    """Fail if two distinct parameters alias the same memory (a shared tensor registered twice)."""
    for i, a in enumerate(params):
        for b in params[i + 1:]:
            if np.may_share_memory(a.data, b.data) and np.shares_memory(a.data, b.data):
                raise ConfigurationError("two optimizer entries alias the same storage", {"first": a.name, "second": b.name})


class OptimState:
    """AdamW moments, step counter and cosine schedule for a set of parameter groups.

    A parameter listed in several groups is registered once; distinct tensors that
    alias one storage are rejected.
    """

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], weight_decay: float = 0.05, total_epochs: float = 1.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if total_epochs <= 0:
            raise ConfigurationError("the cosine horizon must be positive", {"total_epochs": total_epochs})
        self.params: list[Tensor] = []
        self.base_lr: list[float] = []
        self._index: dict[int, int] = {}
        for params, lr in groups:
            for param in params:
                if id(param) in self._index:
                    continue
                self._index[id(param)] = len(self.params)
                self.params.append(param)
                self.base_lr.append(float(lr))
        audit_storage(self.params)
        self.weight_decay = weight_decay
        self.total_epochs = float(total_epochs)
        self.betas = betas
        self.eps = eps
        self.step = 0
        self.param_steps = [0] * len(self.params)
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def __len__(self):
        return len(self.params)

    def learning_rate(self, base: float, t: float) -> float:
        t = min(max(t, 0.0), self.total_epochs)
        return base * 0.5 * (1.0 + math.cos(math.pi * t / self.total_epochs))


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState, epoch_fraction: float) -> None:
    """One AdamW update with decoupled weight decay at the cosine learning rate for ``epoch_fraction``.

    Parameters whose gradient is ``None`` are skipped: no decay, no moment update.
    Bias correction counts the steps each parameter actually took.
    """
    for param, grad in zip(params, grads):
        if id(param) not in state._index:
            raise UsageError("parameter is not registered with this optimizer state", {"name": param.name})
        if grad is not None and not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite gradient", {"name": param.name, "step": state.step + 1})
    state.step += 1
    beta1, beta2 = state.betas
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        i = state._index[id(param)]
        state.param_steps[i] += 1
        correction1 = 1.0 - beta1**state.param_steps[i]
        correction2 = 1.0 - beta2**state.param_steps[i]
        lr = state.learning_rate(state.base_lr[i], epoch_fraction)
        param.data *= 1.0 - lr * state.weight_decay
        m, v = state.exp_avg[i], state.exp_avg_sq[i]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class EpochMetrics(BaseModel):
    epoch: int
    role: Role
    phase: str
    train_loss: float
    train_accuracy: float
    val_loss: float | None = None
    val_accuracy: float | None = None
    forward_passes: int = 0
    backward_passes: int = 0


class PassCounts(BaseModel):
    forward: int = 0
    backward: int = 0


class RunMetrics(BaseModel):
    """Per-epoch history, per-role sample pass counts, wall-clock and test scores of a run."""

    strategy: str
    history: list[EpochMetrics] = Field(default_factory=list)
    passes: dict[str, PassCounts] = Field(default_factory=dict)
    wall_clock: float = 0.0
    test_accuracy: dict[str, float] = Field(default_factory=dict)
    test_loss: dict[str, float] = Field(default_factory=dict)

    def count(self, role: str, forward: int = 0, backward: int = 0) -> None:
        counts = self.passes.setdefault(role, PassCounts())
        counts.forward += forward
        counts.backward += backward

    @property
    def forward_passes(self) -> int:
        return sum(c.forward for c in self.passes.values())

    @property
    def backward_passes(self) -> int:
        return sum(c.backward for c in self.passes.values())

    @property
    def total_passes(self) -> int:
        return self.forward_passes + self.backward_passes

    def role_history(self, role: str, phase: str | None = None) -> list[EpochMetrics]:
        return [m for m in self.history if m.role == role and (phase is None or m.phase == phase)]

    def merge(self, other: "RunMetrics", strategy: str | None = None) -> "RunMetrics":
        merged = RunMetrics(strategy=strategy or self.strategy, history=self.history + other.history,
                            wall_clock=self.wall_clock + other.wall_clock,
                            test_accuracy={**self.test_accuracy, **other.test_accuracy},
                            test_loss={**self.test_loss, **other.test_loss})
        for source in (self, other):
            for role, counts in source.passes.items():
                merged.count(role, counts.forward, counts.backward)
        return merged


@dataclass
class TrainingHooks:
    on_epoch: Callable[[EpochMetrics], None] | None = None
    checkpoint: Callable[[int], None] | None = None
    checkpoint_every: int = 0
    progress: bool = False
    epoch_offset: int = 0


class TaskModel:
    """Encoder, optional QKV adapter bindings and a prediction head on concatenated CLS tokens."""

    def __init__(self, encoder: Encoder, head: MlpHead, adapters: Mapping[int, AdapterLike] | None = None,
                 role: Role = "student", cls_blocks: int = 3, normalize_cls: bool = True):
        if head.n_in != cls_blocks * encoder.config.dim:
            raise ConfigurationError(f"head input {head.n_in} does not match {cls_blocks} CLS tokens of width {encoder.config.dim}")
        self.encoder = encoder
        self.head = head
        self.adapters: dict[int, AdapterLike] = dict(adapters or {})
        self.role = role
        self.cls_blocks = cls_blocks
        self.normalize_cls = normalize_cls

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    @property
    def num_classes(self) -> int:
        return self.head.n_out

    def forward_features(self, images) -> tuple[list[Tensor], Tensor]:
        per_block, _ = encoder_forward(images, self.encoder, self.adapters)
        norm = (self.encoder.norm_weight, self.encoder.norm_bias) if self.normalize_cls else None
        return per_block, extract_cls_concat(per_block, self.cls_blocks, norm, self.config.ln_eps)

    def __call__(self, images) -> Tensor:
        return self.head(self.forward_features(images)[1])

    def adapter_parameters(self) -> list[Tensor]:
        params, seen = [], set()
        for index in sorted(self.adapters):
            for p in self.adapters[index].parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        return params

    def trainable_parameters(self) -> list[Tensor]:
        candidates = self.encoder.parameters() + self.adapter_parameters() + self.head.parameters()
        return [p for p in candidates if p.requires_grad]

    def freeze(self) -> None:
        self.encoder.freeze()
        for p in self.adapter_parameters() + self.head.parameters():
            p.requires_grad = False
            p.zero_grad()


def build_task_model(config: EncoderConfig, num_classes: int, role: Role, seed: int = 0, cls_blocks: int = 3,
                     encoder: Encoder | None = None) -> TaskModel:
    encoder = encoder or Encoder(config)
    head = MlpHead.for_model(cls_blocks * config.dim, num_classes, role, seed=seed)
    return TaskModel(encoder, head, role=role, cls_blocks=cls_blocks)


def trainable_parameter_count(model: TaskModel) -> int:
    return int(sum(p.size for p in model.trainable_parameters()))


def evaluate(model: TaskModel, split: Split, batch_size: int = 256) -> tuple[float | None, float | None]:
    """Mean cross-entropy and accuracy on ``split`` (``None`` for an empty split)."""
    if len(split) == 0:
        return None, None
    loss_sum, correct = 0.0, 0
    with no_grad():
        for images, labels in iterate_batches(split, batch_size):
            logits = model(images)
            loss_sum += cross_entropy(logits, labels).item() * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return loss_sum / len(split), correct / len(split)


def _require_finite(loss: Tensor) -> None:
    if not np.isfinite(loss.item()):
        raise NumericalError("loss is not finite")


def _fit(strategy: str, phase: str, roles: Mapping[str, TaskModel], data: TaskData, epochs: int, batch_size: int, seed: int,
         step: Callable[[np.ndarray, np.ndarray, float], dict[str, tuple[float, np.ndarray]]],
         metrics: RunMetrics, hooks: TrainingHooks) -> None:
    num_batches = max(1, math.ceil(len(data.train) / batch_size))
    flip = "hflip" in data.descriptor.augment
    started = time.perf_counter()
    for epoch in tqdm(range(epochs), desc=f"{strategy}:{phase}", disable=not hooks.progress):
        totals = {role: [0.0, 0, 0] for role in roles}
        rng = epoch_rng(seed, epoch)
        for b, (images, labels) in enumerate(iterate_batches(data.train, batch_size, rng, flip=flip)):
            for role, (loss, logits) in step(images, labels, epoch + b / num_batches).items():
                totals[role][0] += loss * len(labels)
                totals[role][1] += int(np.sum(np.argmax(logits, axis=1) == labels))
                totals[role][2] += len(labels)
        for role, model in roles.items():
            loss_sum, correct, seen = totals[role]
            val_loss, val_accuracy = evaluate(model, data.val, max(batch_size, 256))
            counts = metrics.passes.get(role, PassCounts())
            record = EpochMetrics(epoch=hooks.epoch_offset + epoch, role=role, phase=phase,
                                  train_loss=loss_sum / max(seen, 1), train_accuracy=correct / max(seen, 1),
                                  val_loss=val_loss, val_accuracy=val_accuracy,
                                  forward_passes=counts.forward, backward_passes=counts.backward)
            metrics.history.append(record)
            if hooks.on_epoch:
                hooks.on_epoch(record)
            logging.info(f"[{strategy}/{phase}] epoch {epoch + 1}/{epochs} {role}: "
                         f"loss={record.train_loss:.4f} acc={record.train_accuracy:.4f} val_acc={val_accuracy}")
        if hooks.checkpoint and hooks.checkpoint_every and (epoch + 1) % hooks.checkpoint_every == 0:
            hooks.checkpoint(hooks.epoch_offset + epoch)
    metrics.wall_clock += time.perf_counter() - started


def _score_test(metrics: RunMetrics, roles: Mapping[str, TaskModel], data: TaskData, batch_size: int) -> None:
    for role, model in roles.items():
        loss, accuracy = evaluate(model, data.test, max(batch_size, 256))
        if accuracy is not None:
            metrics.test_accuracy[role] = accuracy
            metrics.test_loss[role] = loss


def _single_model_step(model: TaskModel, state: OptimState, metrics: RunMetrics):
    params = state.params

    def step(images, labels, t):
        zero_grads(params)
        logits = model(images)
        loss = cross_entropy(logits, labels)
        _require_finite(loss)
        backward(loss)
        adamw_step(params, [p.grad for p in params], state, t)
        metrics.count(model.role, forward=len(labels), backward=len(labels))
        return {model.role: (loss.item(), logits.data)}

    return step


def _prepare_single(model: TaskModel, mode: str, optim: OptimConfig) -> list[tuple[list[Tensor], float]]:
    if mode == "probe":
        model.encoder.freeze()
        for p in model.adapter_parameters():
            p.requires_grad = False
        groups = [(model.head.parameters(), optim.lr)]
    elif mode == "lora":
        if not model.adapter_parameters():
            raise ConfigurationError("LoRA training needs adapters bound to the encoder")
        model.encoder.freeze()
        for p in model.adapter_parameters():
            p.requires_grad = True
        groups = [(model.adapter_parameters() + model.head.parameters(), optim.lr)]
    elif mode == "full":
        model.encoder.unfreeze()
        groups = [(model.encoder.parameters(), optim.finetune_lr), (model.head.parameters(), optim.lr)]
    else:
        raise ConfigurationError(f"unknown adaptation mode '{mode}'", {"allowed": ["probe", "lora", "full"]})
    for p in model.head.parameters():
        p.requires_grad = True
    return groups


def train_probing(model: TaskModel, data: TaskData, epochs: int, optim: OptimConfig | None = None, seed: int = 0,
                  hooks: TrainingHooks | None = None) -> tuple[RunMetrics, MlpHead]:
    """Train the head on frozen encoder features."""
    metrics = train_adapt(model, data, epochs, mode="probe", optim=optim, seed=seed, hooks=hooks)
    return metrics, model.head


def train_adapt(model: TaskModel, data: TaskData, epochs: int, mode: Literal["probe", "lora", "full"] = "lora",
                optim: OptimConfig | None = None, seed: int = 0, hooks: TrainingHooks | None = None) -> RunMetrics:
    """Adapt one model on the task: adapters + head (``lora``), everything (``full``) or the head only (``probe``)."""
    optim = optim or OptimConfig()
    hooks = hooks or TrainingHooks()
    groups = _prepare_single(model, mode, optim)
    state = OptimState(groups, optim.weight_decay, total_epochs=epochs, betas=(optim.beta1, optim.beta2), eps=optim.eps)
    metrics = RunMetrics(strategy=mode)
    logging.info(f"Adapting {model.role} {model.config.name} mode={mode}: {len(state)} tensors, "
                 f"{sum(p.size for p in state.params)} trainable values")
    _fit(mode, "adapt", {model.role: model}, data, epochs, optim.batch_size, seed, _single_model_step(model, state, metrics), metrics, hooks)
    _score_test(metrics, {model.role: model}, data, optim.batch_size)
    return metrics


def distill_two_step(teacher: TaskModel, student: TaskModel, data: TaskData, epochs: int, cfg: DistillConfig | None = None,
                     student_mode: Literal["probe", "lora", "full"] = "lora", optim: OptimConfig | None = None,
                     seed: int = 0, hooks: TrainingHooks | None = None) -> RunMetrics:
    """Second step of two-step distillation: train the student against the frozen, already adapted teacher."""
    cfg = cfg or DistillConfig.two_step()
    optim = optim or OptimConfig()
    hooks = hooks or TrainingHooks()
    if teacher.num_classes != student.num_classes:
        raise ConfigurationError(f"teacher predicts {teacher.num_classes} classes but student predicts {student.num_classes}")
    teacher.freeze()
    groups = _prepare_single(student, student_mode, optim)
    state = OptimState(groups, optim.weight_decay, total_epochs=epochs, betas=(optim.beta1, optim.beta2), eps=optim.eps)
    metrics = RunMetrics(strategy="distill-two-step")
    params = state.params

    def step(images, labels, t):
        zero_grads(params)
        with no_grad():
            teacher_logits = teacher(images)
        student_logits = student(images)
        loss = kd_loss(student_logits, teacher_logits, labels, cfg)
        _require_finite(loss)
        backward(loss)
        adamw_step(params, [p.grad for p in params], state, t)
        metrics.count("teacher", forward=len(labels))
        metrics.count("student", forward=len(labels), backward=len(labels))
        student_loss = cross_entropy(student_logits.detach(), labels).item()
        return {"student": (student_loss, student_logits.data)}

    _fit("distill-two-step", "distill", {"student": student}, data, epochs, optim.batch_size, seed, step, metrics, hooks)
    _score_test(metrics, {"student": student}, data, optim.batch_size)
    return metrics


def prepare_slad(teacher_encoder: Encoder, student_encoder: Encoder, rank: int, mapping: BlockMapping, seed: int = 0,
                 alpha: float | None = None, slice_mode: SliceMode = "per_segment") -> tuple[dict[int, LoraAdapter], dict[int, SharedAdapterView]]:
    """Adapters on every teacher block and, for each student block ``i``, a view of teacher adapter ``g(i)``."""
    t_cfg, s_cfg = teacher_encoder.config, student_encoder.config
    if mapping.teacher_depth != t_cfg.depth or mapping.student_depth != s_cfg.depth:
        raise ConfigurationError(f"mapping {mapping.student_depth}->{mapping.teacher_depth} does not fit encoders "
                                 f"{s_cfg.depth}->{t_cfg.depth}")
    teacher_adapters = create_adapters(t_cfg.dim, t_cfg.depth, rank, seed=seed, alpha=alpha)
    views = {i: make_shared_view(teacher_adapters[mapping(i)], s_cfg.dim, t_cfg.dim, slice_mode) for i in range(s_cfg.depth)}
    return teacher_adapters, views


def views_match_parents(views: Mapping[int, SharedAdapterView]) -> bool:
    """Bitwise comparison of each view's effective factors with an explicit gather from its parent."""
    for view in views.values():
        a, b = view.read()
        parent_a, parent_b = view.parent.A.data, view.parent.B.data
        if not np.array_equal(a, parent_a[:view.d_s]) or not np.array_equal(b, parent_b[:, view.column_indices()]):
            return False
    return True


def _check_slad_bindings(teacher: TaskModel, student: TaskModel, mapping: BlockMapping) -> None:
    if mapping.teacher_depth != teacher.config.depth or mapping.student_depth != student.config.depth:
        raise ConfigurationError("mapping does not fit the teacher/student depths",
                                 {"mapping": f"{mapping.student_depth}->{mapping.teacher_depth}",
                                  "encoders": f"{student.config.depth}->{teacher.config.depth}"})
    if mapping.g[-1] >= teacher.config.depth:
        raise ConfigurationError(f"mapping range exceeds teacher depth {teacher.config.depth}")
    for i in range(student.config.depth):
        view = student.adapters.get(i)
        parent = teacher.adapters.get(mapping(i))
        if not isinstance(view, SharedAdapterView) or parent is None or view.parent is not parent:
            raise ConfigurationError(f"student block {i} is not bound to a view of teacher adapter {mapping(i)}")


def train_slad(teacher: TaskModel, student: TaskModel, data: TaskData, epochs: int, mapping: BlockMapping,
               cfg: DistillConfig | None = None, optim: OptimConfig | None = None, seed: int = 0,
               hooks: TrainingHooks | None = None) -> RunMetrics:
    """Joint single-stage training with shared adapters.

    Each batch runs the teacher and then the student, sums the joint loss, does one
    backward and one AdamW step over the teacher adapters (the shared storage), the
    teacher head and the student head.
    """
    cfg = cfg or DistillConfig.slad()
    optim = optim or OptimConfig()
    hooks = hooks or TrainingHooks()
    if teacher.num_classes != student.num_classes:
        raise ConfigurationError(f"teacher predicts {teacher.num_classes} classes but student predicts {student.num_classes}")
    _check_slad_bindings(teacher, student, mapping)
    teacher.encoder.freeze()
    student.encoder.freeze()
    for p in teacher.adapter_parameters() + teacher.head.parameters() + student.head.parameters():
        p.requires_grad = True
    groups = [(teacher.adapter_parameters() + teacher.head.parameters() + student.head.parameters(), optim.lr)]
    state = OptimState(groups, optim.weight_decay, total_epochs=epochs, betas=(optim.beta1, optim.beta2), eps=optim.eps)
    metrics = RunMetrics(strategy="slad")
    params = state.params
    teacher_backward = cfg.alpha_t > 0 or (cfg.alpha_kl > 0 and not cfg.detach_teacher_in_kl)

    def step(images, labels, t):
        zero_grads(params)
        teacher_logits = teacher(images)
        student_logits = student(images)
        loss = slad_loss(student_logits, teacher_logits, labels, cfg)
        _require_finite(loss)
        backward(loss)
        adamw_step(params, [p.grad for p in params], state, t)
        metrics.count("teacher", forward=len(labels), backward=len(labels) if teacher_backward else 0)
        metrics.count("student", forward=len(labels), backward=len(labels))
        teacher_loss = cross_entropy(teacher_logits.detach(), labels).item()
        student_loss = cross_entropy(student_logits.detach(), labels).item()
        return {"teacher": (teacher_loss, teacher_logits.data), "student": (student_loss, student_logits.data)}

    roles = {"teacher": teacher, "student": student}
    _fit("slad", "slad", roles, data, epochs, optim.batch_size, seed, step, metrics, hooks)
    _score_test(metrics, roles, data, optim.batch_size)
    return metrics
