"""Encoder feature pyramids: five levels at strides 1, 2, 4, 8, 16.

Two built-in backbones share the contract: a small two-convs-per-level
"toy" network for desk-scale experiments, and a "vgg16-style" stack that
replicates the classic block layout (channel widths 64/128/256/512/512,
depths 2/2/3/3/3, inter-block max pooling with the final pool removed so
the deepest level stays at stride 16).  An external module satisfying the
same contract can be plugged in instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .modules import FusionUnit

STRIDES = (1, 2, 4, 8, 16)
TOY_CHANNELS = (16, 32, 64, 64, 64)
VGG_CHANNELS = (64, 128, 256, 512, 512)
VGG_DEPTHS = (2, 2, 3, 3, 3)

BACKBONE_KINDS = ("toy", "vgg16-style", "external")


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "toy"
    channels: tuple = TOY_CHANNELS
    block_depths: tuple = (2, 2, 2, 2, 2)
    input_mean: tuple = (0.485, 0.456, 0.406)
    input_std: tuple = (0.229, 0.224, 0.225)
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if len(self.channels) != 5 or len(self.block_depths) != 5:
            raise ConfigError("a backbone declares exactly 5 levels of channels and depths")

    @staticmethod
    def vgg16_style() -> "BackboneConfig":
        return BackboneConfig(kind="vgg16-style", channels=VGG_CHANNELS, block_depths=VGG_DEPTHS)


class FeaturePyramid(NamedTuple):
    levels: tuple  # five NCHW tensors, strictly non-increasing spatial size
    strides: tuple
    channels: tuple


def validate_images(images: torch.Tensor) -> torch.Tensor:
    """Contract check for input batches: N x 3 x H x W in [0, 1], H and W % 16 == 0."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected an N x 3 x H x W batch, got shape {tuple(images.shape)}")
    n, _, h, w = images.shape
    if h % 16:
        raise ShapeError(f"height {h} is not divisible by 16")
    if w % 16:
        raise ShapeError(f"width {w} is not divisible by 16")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return images


class _NormalizedBackbone(nn.Module):
    """Shared input standardization and the documented weight-loading hook."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        mean = torch.tensor(config.input_mean, dtype=torch.float32).reshape(1, 3, 1, 1)
        std = torch.tensor(config.input_std, dtype=torch.float32).reshape(1, 3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def normalize(self, images):
        validate_images(images)
        return (images - self.input_mean.to(images.dtype)) / self.input_std.to(images.dtype)

    def load_weight_map(self, mapping) -> list:
        """Copy named tensors into matching parameters; returns untouched names.

        Keys follow ``named_parameters()`` (see README for the full table).
        Unknown keys or shape mismatches raise.
        """
        params = dict(self.named_parameters())
        params.update(dict(self.named_buffers()))
        loaded = []
        for name, value in mapping.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}; valid names: {sorted(params)[:8]}...")
            value = torch.as_tensor(value)
            if tuple(value.shape) != tuple(params[name].shape):
                raise ShapeError(
                    f"{name}: shape {tuple(value.shape)} != expected {tuple(params[name].shape)}"
                )
            with torch.no_grad():
                params[name].copy_(value)
            loaded.append(name)
        return sorted(set(params) - set(loaded))

    def pyramid(self, levels) -> FeaturePyramid:
        return FeaturePyramid(
            levels=tuple(levels), strides=STRIDES, channels=tuple(self.config.channels)
        )


class ToyBackbone(_NormalizedBackbone):
    """Two fusion units per level; levels 1-4 open with a stride-2 unit."""

    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        blocks = []
        in_ch = 3
        for level, (out_ch, depth) in enumerate(zip(config.channels, config.block_depths)):
            layers = []
            for j in range(depth):
                stride = 2 if (level > 0 and j == 0) else 1
                layers.append(
                    FusionUnit(in_ch, out_ch, stride=stride, bn_momentum=config.bn_momentum)
                )
                in_ch = out_ch
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, images) -> FeaturePyramid:
        x = self.normalize(images)
        levels = []
        for block in self.blocks:
            x = block(x)
            levels.append(x)
        return self.pyramid(levels)


class VGGStyleBackbone(_NormalizedBackbone):
    """Plain conv+ReLU blocks with inter-block pooling, last pool removed."""

    def __init__(self, config: BackboneConfig):
        super().__init__(config)
        blocks = []
        in_ch = 3
        for out_ch, depth in zip(config.channels, config.block_depths):
            layers = []
            for _ in range(depth):
                layers.append(nn.Conv2d(in_ch, out_ch, 3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                in_ch = out_ch
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)

    def forward(self, images) -> FeaturePyramid:
        x = self.normalize(images)
        levels = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            levels.append(x)
        return self.pyramid(levels)


def build_backbone(config: BackboneConfig, external: nn.Module = None) -> nn.Module:
    """Instantiate the configured backbone; ``external`` supplies kind="external"."""
    if config.kind == "toy":
        return ToyBackbone(config)
    if config.kind == "vgg16-style":
        return VGGStyleBackbone(config)
    if config.kind == "external":
        if external is None:
            raise ConfigError('kind="external" requires an external backbone module')
        return external
    raise ConfigError(f"unknown backbone kind {config.kind!r}")


def extract(images: torch.Tensor, backbone: nn.Module) -> FeaturePyramid:
    """Run the backbone and verify the five-level stride contract."""
    pyramid = backbone(images)
    if len(pyramid.levels) != 5:
        raise ShapeError(f"pyramid must have exactly 5 levels, got {len(pyramid.levels)}")
    h, w = images.shape[-2:]
    for i, (level, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
        expect = (h // stride, w // stride)
        if tuple(level.shape[-2:]) != expect:
            raise ShapeError(f"level {i} spatial size {tuple(level.shape[-2:])} != {expect}")
    return pyramid
