# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""Low-rank adapters on the fused QKV projection and the cross-width shared view."""
from __future__ import annotations

from typing import Literal, Union

import numpy as np

from .errors import BindingError, DimensionError, ParameterError, UnsupportedSiteError
from .tensor import Tensor, add, concatenate, matmul, parameter, scale, slice_view

SliceMode = Literal["per_segment", "contiguous"]


class LoraAdapter:
    """The trainable pair ``(A, B)`` added to a frozen weight as ``W0 + A @ B``.

    ``alpha`` switches on the conventional ``alpha / r`` scaling of the update; left at
    ``None`` the update is applied unscaled.
    """

    def __init__(self, A: Tensor, B: Tensor, site: str = "qkv", block: int | None = None, alpha: float | None = None):
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
            raise DimensionError(f"LoRA factors {list(A.shape)} and {list(B.shape)} do not share a rank")
        self.A = A
        self.B = B
        self.site = site
        self.block = block
        self.alpha = alpha

    def __repr__(self):
        return f"LoraAdapter(site={self.site}, block={self.block}, {self.in_features}x{self.out_features}, r={self.rank})"

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def in_features(self) -> int:
        return self.A.shape[0]

    @property
    def out_features(self) -> int:
        return self.B.shape[1]

    @property
    def scaling(self) -> float:
        return 1.0 if self.alpha is None else self.alpha / self.rank

    def factors(self) -> tuple[Tensor, Tensor]:
        return self.A, self.B

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        return self.A.data, self.B.data

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]


class SharedAdapterView:
    """A student-width window onto a teacher adapter.

    Rows ``[0, d_s)`` of ``A`` and, for ``per_segment`` slicing, the first ``d_s`` columns
    of each of the Q, K and V segments of ``B``. The view owns no storage: its factors are
    rebuilt from the parent on every forward, and gradients flowing through them land in
    the parent's ``grad`` at the selected offsets.
    """

    def __init__(self, parent: LoraAdapter, d_s: int, d_t: int, slice_mode: SliceMode = "per_segment"):
        self.parent = parent
        self.d_s = d_s
        self.d_t = d_t
        self.slice_mode = slice_mode
        self.row_range = (0, d_s)
        if slice_mode == "per_segment":
            self.col_ranges = [(k * d_t, k * d_t + d_s) for k in range(3)]
        else:
            self.col_ranges = [(0, 3 * d_s)]

    def __repr__(self):
        return f"SharedAdapterView(parent={self.parent!r}, d_s={self.d_s}, mode={self.slice_mode})"

    @property
    def site(self) -> str:
        return self.parent.site

    @property
    def block(self) -> int | None:
        return self.parent.block

    @property
    def rank(self) -> int:
        return self.parent.rank

    @property
    def in_features(self) -> int:
        return self.d_s

    @property
    def out_features(self) -> int:
        return 3 * self.d_s

    @property
    def scaling(self) -> float:
        return self.parent.scaling

    def column_indices(self) -> np.ndarray:
        return np.concatenate([np.arange(start, stop) for start, stop in self.col_ranges])

    @property
    def A(self) -> Tensor:
        return slice_view(self.parent.A, 0, *self.row_range)

    @property
    def B(self) -> Tensor:
        pieces = [slice_view(self.parent.B, 1, start, stop) for start, stop in self.col_ranges]
        return pieces[0] if len(pieces) == 1 else concatenate(pieces, axis=1)

    def factors(self) -> tuple[Tensor, Tensor]:
        return self.A, self.B

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        """Current effective factors as arrays; ``A`` is a numpy view of the parent."""
        a = self.parent.A.data[self.row_range[0]:self.row_range[1]]
        b = np.concatenate([self.parent.B.data[:, start:stop] for start, stop in self.col_ranges], axis=1)
        return a, b

    def parameters(self) -> list[Tensor]:
        return []


AdapterLike = Union[LoraAdapter, SharedAdapterView]


def init_lora(m: int, n: int, r: int = 16, seed: int = 0, site: str = "qkv", block: int | None = None, alpha: float | None = None) -> LoraAdapter:
    """Create an adapter for an ``m x n`` weight: Kaiming-uniform ``A`` (fan_in = m, gain sqrt 2), zero ``B``."""
    if not 1 <= r <= min(m, n):
        raise ParameterError(f"LoRA rank must lie in [1, {min(m, n)}]", {"rank": r, "m": m, "n": n})
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / m)
    A = parameter(rng.uniform(-bound, bound, (m, r)), name=f"lora.{site}.A")
    B = parameter(np.zeros((r, n)), name=f"lora.{site}.B")
    return LoraAdapter(A, B, site=site, block=block, alpha=alpha)


def create_adapters(dim: int, depth: int, r: int = 16, seed: int = 0, blocks=None, alpha: float | None = None) -> dict[int, LoraAdapter]:
    """One QKV adapter per block (or per listed block), each seeded from ``(seed, block)``."""
    blocks = range(depth) if blocks is None else blocks
    adapters = {}
    for index in blocks:
        block_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
        adapters[index] = init_lora(dim, 3 * dim, r, seed=block_seed, site="qkv", block=index, alpha=alpha)
    return adapters


def lora_linear_forward(x: Tensor, W0: Tensor, adapter: AdapterLike) -> Tensor:
    """``x @ W0 + x @ A @ B`` without materializing ``W0 + A @ B``."""
    if x.shape[-1] != W0.shape[0] or adapter.in_features != W0.shape[0] or adapter.out_features != W0.shape[1]:
        raise BindingError(
            f"adapter {adapter.in_features}x{adapter.out_features} does not fit weight {list(W0.shape)} with input width {x.shape[-1]}"
        )
    A, B = adapter.factors()
    delta = matmul(matmul(x, A), B)
    if adapter.scaling != 1.0:
        delta = scale(delta, adapter.scaling)
    return add(matmul(x, W0), delta)


def make_shared_view(teacher_adapter: LoraAdapter, d_s: int, d_t: int, slice_mode: SliceMode = "per_segment") -> SharedAdapterView:
    if d_s > d_t:
        raise DimensionError(f"student width {d_s} exceeds teacher width {d_t}")
    if teacher_adapter.site != "qkv" or teacher_adapter.out_features != 3 * d_t:
        raise UnsupportedSiteError(f"only fused QKV adapters can be shared, got site '{teacher_adapter.site}'",
                                   {"out_features": teacher_adapter.out_features, "d_t": d_t})
    if teacher_adapter.in_features != d_t:
        raise DimensionError(f"teacher adapter input width {teacher_adapter.in_features} does not equal d_t={d_t}")
    if slice_mode not in ("per_segment", "contiguous"):
        raise ParameterError(f"unknown slice mode '{slice_mode}'")
    return SharedAdapterView(teacher_adapter, d_s, d_t, slice_mode)


def merge_weights(W0: Tensor, adapter: AdapterLike) -> Tensor:
    """Dense ``W0 + A @ B`` for export and inference."""
    a, b = adapter.read()
    if W0.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(f"cannot merge adapter {a.shape[0]}x{b.shape[1]} into weight {list(W0.shape)}")
    return Tensor(W0.data + adapter.scaling * (a @ b))
