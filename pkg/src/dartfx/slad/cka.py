# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Linear Centered Kernel Alignment between encoder layers."""
from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
import os
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, Field, field_validator

from .data import Split, TaskData
from .errors import UndefinedSimilarityError, UsageError
from .tensor import no_grad
from .vit import cls_token, encoder_forward, mean_patch_token

TokenChoice = Literal["cls", "mean"]


@dataclass
class FeatureMatrix:
    """``n x p`` representation of one layer on a probe batch."""

    values: np.ndarray
    layer: int = 0
    model: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 2:
            raise UsageError(f"a feature matrix needs shape [n >= 2, p], got {list(self.values.shape)}")
        if not np.all(np.isfinite(self.values)):
            raise UsageError("feature matrix has non-finite entries", {"layer": self.layer, "model": self.model})

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def center_columns(X: FeatureMatrix | np.ndarray) -> FeatureMatrix:
    """Subtract each column's mean."""
    values = _values(X)
    centered = values - values.mean(axis=0, keepdims=True)
    if isinstance(X, FeatureMatrix):
        return FeatureMatrix(centered, X.layer, X.model)
    return FeatureMatrix(centered)


def _is_degenerate(centered: np.ndarray, original: np.ndarray) -> bool:
    scale = max(float(np.abs(original).max(initial=0.0)), 1.0)
    return not np.any(np.abs(centered) > 1e-12 * scale)


def linear_cka(X: FeatureMatrix | np.ndarray, Y: FeatureMatrix | np.ndarray) -> float:
    """``||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F)`` on column-centered features."""
    x, y = _values(X), _values(Y)
    if x.shape[0] != y.shape[0]:
        raise UsageError(f"feature matrices disagree on sample count: {x.shape[0]} vs {y.shape[0]}")
    xc, yc = center_columns(x).values, center_columns(y).values
    if _is_degenerate(xc, x) or _is_degenerate(yc, y):
        raise UndefinedSimilarityError("CKA is undefined for zero-variance features")
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


class CkaMatrix(BaseModel):
    """Teacher layers (rows) by student layers (columns)."""

    values: list[list[float]]
    probe: str
    teacher_model: str = "teacher"
    student_model: str = "student"
    token: TokenChoice = "cls"

    @field_validator("values")
    @classmethod
    def entries_in_unit_interval(cls, values):
        array = np.asarray(values, dtype=np.float64)
        if array.size and (array.min() < -1e-9 or array.max() > 1.0 + 1e-9):
            raise ValueError(f"CKA entries must lie in [0, 1], got [{array.min()}, {array.max()}]")
        return values

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64).reshape(len(self.values), -1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.array.shape


def cka_matrix(teacher_features: Sequence, student_features: Sequence, probe: str = "", teacher_model: str = "teacher",
               student_model: str = "student", token: TokenChoice = "cls") -> CkaMatrix:
    """Entry ``(i, j)`` is ``linear_cka(teacher layer i, student layer j)``."""
    teacher = [_values(f) for f in teacher_features]
    student = [_values(f) for f in student_features]
    sizes = {f.shape[0] for f in teacher + student}
    if len(sizes) > 1:
        raise UsageError("teacher and student features were not computed on the same probe batch", {"sample_counts": sorted(sizes)})
    values = [[linear_cka(t, s) for s in student] for t in teacher]
    return CkaMatrix(values=values, probe=probe, teacher_model=teacher_model, student_model=student_model, token=token)


def delta_cka(before: CkaMatrix, after: CkaMatrix) -> np.ndarray:
    """Element-wise ``before - after``."""
    if before.shape != after.shape:
        raise UsageError(f"CKA matrices differ in shape: {before.shape} vs {after.shape}")
    if before.probe != after.probe:
        raise UsageError("CKA matrices were computed on different probe batches", {"before": before.probe, "after": after.probe})
    return before.array - after.array


def mean_aligned_cka(M: CkaMatrix | np.ndarray, mapping=None) -> float:
    """Mean of the entries ``(g(j), j)`` over student layers ``j``; the diagonal when no mapping is given."""
    array = M.array if isinstance(M, CkaMatrix) else np.asarray(M, dtype=np.float64)
    rows, cols = array.shape
    if mapping is None:
        if rows != cols:
            raise UsageError(f"a {rows}x{cols} matrix needs a block mapping")
        g = list(range(cols))
    else:
        if mapping.teacher_depth != rows or mapping.student_depth != cols:
            raise UsageError(f"mapping {mapping.student_depth}->{mapping.teacher_depth} does not fit a {rows}x{cols} matrix")
        g = mapping.g
    return float(np.mean([array[g[j], j] for j in range(cols)]))


def probe_batch(data: TaskData, size: int = 256, seed: int = 0) -> tuple[Split, str]:
    """Fixed, un-augmented probe images: drawn from validation, topped up from test when validation is short."""
    pool = data.val
    source = "val"
    if len(pool) < size and len(data.test):
        pool = Split(np.concatenate([data.val.images, data.test.images]), np.concatenate([data.val.labels, data.test.labels]))
        source = "val+test"
    if len(pool) < 2:
        raise UsageError("not enough samples for a CKA probe batch", {"available": len(pool)})
    count = min(size, len(pool))
    indices = np.sort(np.random.default_rng([seed, 31337]).choice(len(pool), count, replace=False))
    descriptor = f"{data.descriptor.label}:{source}:n={count}:seed={seed}"
    return pool.subset(indices), descriptor


def collect_features(model, images: np.ndarray, token: TokenChoice = "cls", batch_size: int = 256) -> list[FeatureMatrix]:
    """Per-block token representations of ``model`` (a ``TaskModel``) on ``images``."""
    pick = cls_token if token == "cls" else mean_patch_token
    chunks: list[list[np.ndarray]] = [[] for _ in range(model.config.depth)]
    with no_grad():
        for start in range(0, len(images), batch_size):
            per_block, _ = encoder_forward(images[start:start + batch_size], model.encoder, model.adapters)
            for layer, tokens in enumerate(per_block):
                chunks[layer].append(pick(tokens).data.copy())
    return [FeatureMatrix(np.concatenate(parts), layer, model.config.name) for layer, parts in enumerate(chunks)]


class CkaSummary(BaseModel):
    probe: str
    token: TokenChoice
    mapping: list[int]
    mean_aligned_before: float
    mean_aligned_after: float
    mean_aligned_delta: float = Field(description="before minus after, over aligned layer pairs")


def write_cka_csv(path: str | os.PathLike, values: CkaMatrix | np.ndarray) -> Path:
    """Rows are teacher layers, columns student layers, fixed 6-decimal formatting."""
    array = values.array if isinstance(values, CkaMatrix) else np.asarray(values)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["teacher_layer"] + [f"student_{j}" for j in range(array.shape[1])])
        for i, row in enumerate(array):
            writer.writerow([i] + [f"{value:.6f}" for value in row])
    logging.debug(f"Wrote {array.shape[0]}x{array.shape[1]} CKA table to {path}")
    return path


def read_cka_csv(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    return np.asarray([[float(v) for v in row[1:]] for row in rows[1:]], dtype=np.float64)
