# SPDX-FileCopyrightText: 2024-present kulnor <pascal.heus@gmail.com>
#
# SPDX-License-Identifier: MIT
"""A small pre-norm Vision Transformer encoder with per-block feature taps."""
from __future__ import annotations

import logging
from typing import Mapping

import numpy as np
from pydantic import BaseModel, Field

from .errors import BindingError, ConfigurationError, UsageError
from .lora import AdapterLike, lora_linear_forward
from .tensor import (
    Tensor,
    add,
    concatenate,
    gelu,
    layernorm,
    matmul,
    parameter,
    reshape,
    slice_view,
    softmax_temperature,
    transpose,
)


class EncoderConfig(BaseModel):
    name: str = "encoder"
    depth: int = Field(default=6, ge=1)
    dim: int = Field(default=64, ge=1)
    heads: int = Field(default=4, ge=1)
    patch_size: int = Field(default=8, ge=1)
    image_size: int = Field(default=32, ge=1)
    channels: int = Field(default=3, ge=1)
    mlp_ratio: int = Field(default=4, ge=1)
    ln_eps: float = Field(default=1e-6, gt=0)
    init_seed: int = 0  # stands in for the task-agnostic pretrained state

    def model_post_init(self, __context):
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}", {"encoder": self.name})
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}", {"encoder": self.name}
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return self.dim * self.mlp_ratio


# desk-scale stand-ins for the base/small pair and for an unequal-depth pair
DESK_TEACHER = EncoderConfig(name="ViT-B-desk", depth=6, dim=64, heads=4, init_seed=1)
DESK_STUDENT = EncoderConfig(name="ViT-S-desk", depth=6, dim=32, heads=2, init_seed=2)
DESK_DEEP_TEACHER = EncoderConfig(name="ViT-L-desk", depth=12, dim=64, heads=4, init_seed=3)

ENCODER_PRESETS = {config.name: config for config in (DESK_TEACHER, DESK_STUDENT, DESK_DEEP_TEACHER)}


def resolve_preset(value):
    """Preset name to a fresh ``EncoderConfig``; anything else passes through for validation."""
    if isinstance(value, str):
        if value not in ENCODER_PRESETS:
            raise ValueError(f"unknown encoder preset '{value}', expected one of {sorted(ENCODER_PRESETS)}")
        return ENCODER_PRESETS[value].model_copy()
    return value


class Block:
    """Parameters of one pre-norm transformer block."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.norm1_weight = parameter(np.ones(dim))
        self.norm1_bias = parameter(np.zeros(dim))
        self.qkv_weight = parameter(rng.normal(0.0, dim**-0.5, (dim, 3 * dim)))
        self.qkv_bias = parameter(np.zeros(3 * dim))
        self.proj_weight = parameter(rng.normal(0.0, dim**-0.5, (dim, dim)))
        self.proj_bias = parameter(np.zeros(dim))
        self.norm2_weight = parameter(np.ones(dim))
        self.norm2_bias = parameter(np.zeros(dim))
        self.fc1_weight = parameter(rng.normal(0.0, dim**-0.5, (dim, hidden)))
        self.fc1_bias = parameter(np.zeros(hidden))
        self.fc2_weight = parameter(rng.normal(0.0, hidden**-0.5, (hidden, dim)))
        self.fc2_bias = parameter(np.zeros(dim))

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            "norm1.weight": self.norm1_weight,
            "norm1.bias": self.norm1_bias,
            "attn.qkv.weight": self.qkv_weight,
            "attn.qkv.bias": self.qkv_bias,
            "attn.proj.weight": self.proj_weight,
            "attn.proj.bias": self.proj_bias,
            "norm2.weight": self.norm2_weight,
            "norm2.bias": self.norm2_bias,
            "mlp.fc1.weight": self.fc1_weight,
            "mlp.fc1.bias": self.fc1_bias,
            "mlp.fc2.weight": self.fc2_weight,
            "mlp.fc2.bias": self.fc2_bias,
        }


class Encoder:
    """Patch embedding, CLS token, learned positions, ``depth`` blocks and a final norm.

    The QKV projection of each block is a single ``dim x 3*dim`` matrix ordered Q, K, V;
    it is the only site LoRA adapters attach to.
    """

    def __init__(self, config: EncoderConfig, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        d = config.dim
        patch_dim = config.patch_size * config.patch_size * config.channels
        self.patch_weight = parameter(rng.normal(0.0, patch_dim**-0.5, (patch_dim, d)))
        self.patch_bias = parameter(np.zeros(d))
        self.cls_token = parameter(rng.normal(0.0, 0.02, (1, 1, d)))
        self.pos_embed = parameter(rng.normal(0.0, 0.02, (1, config.tokens, d)))
        self.blocks = [Block(d, config.mlp_hidden, rng) for _ in range(config.depth)]
        self.norm_weight = parameter(np.ones(d))
        self.norm_bias = parameter(np.zeros(d))
        logging.debug(f"Initialized encoder {config.name} depth={config.depth} dim={d}")

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "patch_embed.weight": self.patch_weight,
            "patch_embed.bias": self.patch_bias,
            "cls_token": self.cls_token,
            "pos_embed": self.pos_embed,
        }
        for index, block in enumerate(self.blocks):
            for name, tensor in block.named_parameters().items():
                params[f"blocks.{index}.{name}"] = tensor
        params["norm.weight"] = self.norm_weight
        params["norm.bias"] = self.norm_bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self) -> None:
        for tensor in self.parameters():
            tensor.requires_grad = False
            tensor.zero_grad()

    def unfreeze(self) -> None:
        for tensor in self.parameters():
            tensor.requires_grad = True

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise ConfigurationError("checkpoint is missing encoder parameters", {"missing": missing[:5]})
        for name, tensor in params.items():
            value = np.asarray(state[name], dtype=tensor.data.dtype)
            if value.shape != tensor.shape:
                raise ConfigurationError(f"shape mismatch for {name}", {"expected": list(tensor.shape), "found": list(value.shape)})
            tensor.data[...] = value


def _as_images(images) -> Tensor:
    return images if isinstance(images, Tensor) else Tensor(images)


def patch_embed(images, enc: Encoder) -> Tensor:
    """Split ``[B, H, W, C]`` images into patches, project them, prepend CLS and add positions."""
    images = _as_images(images)
    cfg = enc.config
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigurationError(
            f"expected images of shape [B, {cfg.image_size}, {cfg.image_size}, {cfg.channels}], got {list(images.shape)}",
            {"encoder": cfg.name},
        )
    batch, p, g = images.shape[0], cfg.patch_size, cfg.grid
    patches = reshape(images, (batch, g, p, g, p, cfg.channels))
    patches = transpose(patches, (0, 1, 3, 2, 4, 5))
    patches = reshape(patches, (batch, cfg.num_patches, p * p * cfg.channels))
    tokens = add(matmul(patches, enc.patch_weight), enc.patch_bias)
    cls = add(Tensor(np.zeros((batch, 1, cfg.dim))), enc.cls_token)
    return add(concatenate([cls, tokens], axis=1), enc.pos_embed)


def _attention(x: Tensor, block: Block, heads: int, adapter: AdapterLike | None, probe: list | None) -> Tensor:
    batch, n, d = x.shape
    hd = d // heads
    if adapter is None:
        qkv = matmul(x, block.qkv_weight)
    else:
        qkv = lora_linear_forward(x, block.qkv_weight, adapter)
    qkv = add(qkv, block.qkv_bias)
    qkv = transpose(reshape(qkv, (batch, n, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = (reshape(slice_view(qkv, 0, i, i + 1), (batch, heads, n, hd)) for i in range(3))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (hd**-0.5)
    attn = softmax_temperature(scores, 1.0)
    if probe is not None:
        probe.append(attn)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = reshape(out, (batch, n, d))
    return add(matmul(out, block.proj_weight), block.proj_bias)


def _mlp(x: Tensor, block: Block) -> Tensor:
    hidden = gelu(add(matmul(x, block.fc1_weight), block.fc1_bias))
    return add(matmul(hidden, block.fc2_weight), block.fc2_bias)


def check_bindings(enc: Encoder, adapters: Mapping[int, AdapterLike]) -> None:
    cfg = enc.config
    for index, adapter in adapters.items():
        if not 0 <= index < cfg.depth:
            raise BindingError(f"adapter bound to block {index} but encoder has {cfg.depth} blocks", {"encoder": cfg.name})
        if adapter.in_features != cfg.dim or adapter.out_features != 3 * cfg.dim:
            raise BindingError(
                f"adapter of shape {adapter.in_features}x{adapter.out_features} does not fit QKV {cfg.dim}x{3 * cfg.dim}",
                {"encoder": cfg.name, "block": index},
            )


def encoder_forward(
    images,
    enc: Encoder,
    adapters: Mapping[int, AdapterLike] | None = None,
    attention_probe: list | None = None,
) -> tuple[list[Tensor], Tensor]:
    """Run the encoder; returns the output tokens of every block and the final normed tokens."""
    adapters = adapters or {}
    check_bindings(enc, adapters)
    cfg = enc.config
    x = patch_embed(images, enc)
    per_block = []
    for index, block in enumerate(enc.blocks):
        h = layernorm(x, block.norm1_weight, block.norm1_bias, cfg.ln_eps)
        x = add(x, _attention(h, block, cfg.heads, adapters.get(index), attention_probe))
        h = layernorm(x, block.norm2_weight, block.norm2_bias, cfg.ln_eps)
        x = add(x, _mlp(h, block))
        per_block.append(x)
    final = layernorm(x, enc.norm_weight, enc.norm_bias, cfg.ln_eps)
    return per_block, final


def cls_token(tokens: Tensor) -> Tensor:
    batch, _, d = tokens.shape
    return reshape(slice_view(tokens, 1, 0, 1), (batch, d))


def mean_patch_token(tokens: Tensor) -> Tensor:
    return slice_view(tokens, 1, 1, tokens.shape[1]).mean(axis=1)


def extract_cls_concat(per_block_tokens: list[Tensor], k: int = 3, norm: tuple[Tensor, Tensor] | None = None, eps: float = 1e-6) -> Tensor:
    """Concatenate the CLS vectors of the last ``k`` blocks, oldest block first.

    When ``norm`` (gamma, beta) is given each CLS vector is layer-normalized first.
    """
    depth = len(per_block_tokens)
    if not 1 <= k <= depth:
        raise UsageError(f"cannot take the last {k} blocks of a depth-{depth} encoder")
    pieces = []
    for tokens in per_block_tokens[depth - k:]:
        cls = cls_token(tokens)
        if norm is not None:
            cls = layernorm(cls, norm[0], norm[1], eps)
        pieces.append(cls)
    return pieces[0] if k == 1 else concatenate(pieces, axis=1)
