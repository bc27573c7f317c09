# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Prediction heads and the task, distillation and joint losses."""
from __future__ import annotations

import math
from typing import Literal, Mapping

import numpy as np
from pydantic import BaseModel, Field

from .errors import ConfigurationError, DataError, DimensionError
from .tensor import (
    Tensor,
    add,
    gather,
    gelu,
    log_softmax_temperature,
    matmul,
    mul,
    parameter,
    reshape,
    scale,
    softmax_temperature,
    sum_,
)


def head_sizes(n_in: int, n_out: int, model_class: Literal["student", "teacher"]) -> int:
    """Hidden width of the two-layer head: ``n_in`` for students, ``sqrt(n_in * n_out)`` for teachers."""
    if model_class == "student":
        return n_in
    return int(round(math.sqrt(n_in * n_out)))


class MlpHead:
    """Linear -> GELU -> Linear."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, seed: int = 0):
        self.n_in, self.n_hidden, self.n_out = n_in, n_hidden, n_out
        rng = np.random.default_rng(seed)
        bound1, bound2 = n_in**-0.5, n_hidden**-0.5
        self.fc1_weight = parameter(rng.uniform(-bound1, bound1, (n_in, n_hidden)))
        self.fc1_bias = parameter(np.zeros(n_hidden))
        self.fc2_weight = parameter(rng.uniform(-bound2, bound2, (n_hidden, n_out)))
        self.fc2_bias = parameter(np.zeros(n_out))

    @classmethod
    def for_model(cls, n_in: int, n_out: int, model_class: Literal["student", "teacher"], seed: int = 0) -> "MlpHead":
        return cls(n_in, head_sizes(n_in, n_out, model_class), n_out, seed=seed)

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[-1] != self.n_in:
            raise DimensionError(f"head expects {self.n_in} input features, got {features.shape[-1]}")
        hidden = gelu(add(matmul(features, self.fc1_weight), self.fc1_bias))
        return add(matmul(hidden, self.fc2_weight), self.fc2_bias)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "fc1.weight": self.fc1_weight,
            "fc1.bias": self.fc1_bias,
            "fc2.weight": self.fc2_weight,
            "fc2.bias": self.fc2_bias,
        }

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for name, tensor in self.named_parameters().items():
            if name not in state or np.shape(state[name]) != tensor.shape:
                raise ConfigurationError(f"checkpoint does not fit head parameter {name}")
            tensor.data[...] = state[name]


class DistillConfig(BaseModel):
    """Temperature and loss weights of the distillation and joint objectives.

    ``kl_direction`` picks ``KL(p_teacher || p_student)`` (default) or the reverse;
    ``detach_teacher_in_kl`` stops the KL gradient from reaching the teacher.
    """

    temperature: float = Field(default=2.0, gt=0)
    alpha_s: float = Field(default=0.5, ge=0)
    alpha_t: float = Field(default=0.0, ge=0)
    alpha_kl: float = Field(default=0.5, ge=0)
    detach_teacher_in_kl: bool = True
    kl_direction: Literal["teacher_student", "student_teacher"] = "teacher_student"

    def model_post_init(self, __context):
        if max(self.alpha_s, self.alpha_t, self.alpha_kl) <= 0:
            raise ConfigurationError("at least one loss weight must be positive")

    @property
    def T(self) -> float:
        return self.temperature

    @classmethod
    def two_step(cls, **overrides) -> "DistillConfig":
        return cls(**{"temperature": 2.0, "alpha_s": 0.5, "alpha_t": 0.0, "alpha_kl": 0.5, **overrides})

    @classmethod
    def slad(cls, **overrides) -> "DistillConfig":
        return cls(**{"temperature": 2.0, "alpha_s": 1.0, "alpha_t": 1.0, "alpha_kl": 1.0, **overrides})


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise DimensionError(f"logits {list(logits.shape)} do not match {labels.shape[0]} labels")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes})", {"min": int(labels.min()), "max": int(labels.max())})
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = _check_labels(logits, labels)
    batch, classes = logits.shape
    log_probs = reshape(log_softmax_temperature(logits, 1.0), (batch * classes,))
    picked = gather(log_probs, np.arange(batch) * classes + labels)
    return scale(sum_(picked), -1.0 / batch)


def kl_divergence(student_logits: Tensor, teacher_logits: Tensor, T: float, direction: str = "teacher_student", detach_teacher: bool = True) -> Tensor:
    """Batch-mean KL divergence between the temperature-softened distributions."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(f"student logits {list(student_logits.shape)} and teacher logits {list(teacher_logits.shape)} differ")
    teacher = teacher_logits.detach() if detach_teacher else teacher_logits
    log_ps = log_softmax_temperature(student_logits, T)
    log_pt = log_softmax_temperature(teacher, T)
    if direction == "teacher_student":
        weights, ratio = softmax_temperature(teacher, T), add(log_pt, scale(log_ps, -1.0))
    else:
        weights, ratio = softmax_temperature(student_logits, T), add(log_ps, scale(log_pt, -1.0))
    return scale(sum_(mul(weights, ratio)), 1.0 / student_logits.shape[0])


def _weighted(terms: list[tuple[float, Tensor | None]]) -> Tensor:
    total = None
    for weight, term in terms:
        if weight == 0 or term is None:
            continue
        weighted = scale(term, weight)
        total = weighted if total is None else add(total, weighted)
    return total if total is not None else Tensor(0.0)


def slad_loss(student_logits: Tensor, teacher_logits: Tensor, labels, cfg: DistillConfig) -> Tensor:
    """``a_s CE(student) + a_t CE(teacher) + a_kl T^2 KL`` with both CE terms at T=1."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(f"student logits {list(student_logits.shape)} and teacher logits {list(teacher_logits.shape)} differ")
    T = cfg.temperature
    student_ce = cross_entropy(student_logits, labels) if cfg.alpha_s else None
    teacher_ce = cross_entropy(teacher_logits, labels) if cfg.alpha_t else None
    kl = None
    if cfg.alpha_kl:
        kl = kl_divergence(student_logits, teacher_logits, T, cfg.kl_direction, cfg.detach_teacher_in_kl)
    return _weighted([(cfg.alpha_s, student_ce), (cfg.alpha_t, teacher_ce), (cfg.alpha_kl * T * T, kl)])


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, labels, cfg: DistillConfig) -> Tensor:
    """``a_s CE(student) + a_kl T^2 KL``; the teacher CE weight is ignored."""
    return slad_loss(student_logits, teacher_logits, labels, cfg.model_copy(update={"alpha_t": 0.0}))
