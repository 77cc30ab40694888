"""Compact CNN feature extractor and the dilated multi-scale pyramid."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import GeometryError, ShapeError, Tensor, conv2d, conv_output_size, max_pool2d, relu


class InputError(ValueError):
    """Image tensor does not match the configured input geometry."""


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    block_channels: tuple[int, ...] = (64, 128, 128, 128)
    pool_after: tuple[int, ...] = (0, 1)
    proj_channels: int = 64
    dilations: tuple[int, ...] = (1, 2, 4, 8)

    def __post_init__(self):
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ValueError("block_channels must be non-empty positive ints")
        if self.dilations[0] != 1 or any(b <= a for a, b in zip(self.dilations, self.dilations[1:])):
            raise ValueError(f"dilations must start at 1 and strictly increase, got {self.dilations}")
        if self.proj_channels < 1 or self.input_size < 1:
            raise ValueError("proj_channels and input_size must be positive")

    @property
    def feature_channels(self) -> int:
        return self.block_channels[-1]

    @property
    def feature_size(self) -> int:
        return self.input_size // (2 ** len(self.pool_after))

    @property
    def level_size(self) -> int:
        # stride 2, padding == dilation, 3x3 kernel
        return conv_output_size(self.feature_size, 3, 2, 1, 1)


@dataclass
class PyramidFeatures:
    levels: list[Tensor]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        chans = {lv.shape[-3] for lv in self.levels}
        if len(chans) != 1:
            raise ShapeError(f"pyramid levels disagree on channel count: {sorted(chans)}")
        sizes = [lv.shape[-2] for lv in self.levels]
        if any(b > a for a, b in zip(sizes, sizes[1:])):
            raise ShapeError(f"pyramid level heights must be non-increasing, got {sizes}")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, s: int) -> Tensor:
        return self.levels[s]


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    """He-uniform conv kernels, zero biases."""
    out = {}
    c_in = 3
    for b, c_out in enumerate(cfg.block_channels):
        out[f"backbone.conv{b}.weight"] = _he_uniform(rng, (c_out, c_in, 3, 3), dtype)
        out[f"backbone.conv{b}.bias"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    return out


def init_pyramid(cfg: BackboneConfig, rng: np.random.Generator, dtype) -> dict[str, np.ndarray]:
    out = {}
    for s, _ in enumerate(cfg.dilations):
        shape = (cfg.proj_channels, cfg.feature_channels, 3, 3)
        out[f"pyramid.level{s}.weight"] = _he_uniform(rng, shape, dtype)
        out[f"pyramid.level{s}.bias"] = np.zeros(cfg.proj_channels, dtype=dtype)
    return out


def _he_uniform(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def extract_features(image: Tensor, params: Mapping[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Map [3,H,W] (or a [B,3,H,W] stack) to the feature map F.

    Each block is a padded 3x3 conv followed by ReLU, with 2x2 max pooling
    after the blocks listed in ``cfg.pool_after``.
    """
    if image.ndim not in (3, 4) or image.shape[-3] != 3:
        raise InputError(f"expected a 3-channel image, got shape {image.shape}")
    if image.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise InputError(
            f"expected {cfg.input_size}x{cfg.input_size} input, got {image.shape[-2]}x{image.shape[-1]}"
        )
    x = image
    for b in range(len(cfg.block_channels)):
        x = relu(conv2d(x, params[f"backbone.conv{b}.weight"], params[f"backbone.conv{b}.bias"], padding=1))
        if b in cfg.pool_after:
            x = max_pool2d(x, 2)
    return x


def dilated_level(F: Tensor, weight: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """One pyramid level: stride-2 3x3 conv at the given dilation, then ReLU."""
    return relu(conv2d(F, weight, bias, stride=2, dilation=dilation, padding=dilation))


def build_pyramid(F: Tensor, params: Mapping[str, Tensor], cfg: BackboneConfig) -> PyramidFeatures:
    if F.shape[-3] != cfg.feature_channels:
        raise ShapeError(f"feature map has {F.shape[-3]} channels, expected {cfg.feature_channels}")
    if min(F.shape[-2:]) < 1:
        raise GeometryError("feature map is empty")
    levels = [
        dilated_level(F, params[f"pyramid.level{s}.weight"], params[f"pyramid.level{s}.bias"], d)
        for s, d in enumerate(cfg.dilations)
    ]
    return PyramidFeatures(levels)
