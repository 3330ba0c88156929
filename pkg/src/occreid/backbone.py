"""Small convolutional feature extractor that emits transformer tokens.

images (N, 3, Hin, Win) -> f (N, C, H, W) -> a = relu(f) -> 1x1 conv to d
channels -> g (N, d, H*W), flattened row-major so token j sits at spatial
location (j // W, j % W).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError
from .nn import Conv2d, Module


@dataclass
class BackboneConfig:
    channels: tuple[int, ...] = (32, 64, 128, 512)
    strides: tuple[int, ...] = (2, 2, 2, 1)
    convs_per_stage: int = 1
    height: int = 256
    width: int = 128
    dim: int = 256

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.channels) != len(self.strides):
            raise ConfigError("backbone: channels and strides must have equal length")
        if self.dim >= self.channels[-1]:
            raise ConfigError(
                f"backbone: dim={self.dim} must be smaller than the last stage width {self.channels[-1]}")
        h, w = self.feature_size
        if h < 2 or w < 2:
            raise ConfigError(f"backbone: feature map {h}x{w} too small, need at least 2x2")

    @property
    def feature_size(self) -> tuple[int, int]:
        h, w = self.height, self.width
        for s in self.strides:
            # 3x3 conv, padding 1
            h = (h - 1) // s + 1
            w = (w - 1) // s + 1
        return h, w

    @property
    def num_tokens(self) -> int:
        h, w = self.feature_size
        return h * w


@dataclass
class FeatureMap:
    f: Tensor  # (N, C, H, W) pre-activation
    a: Tensor  # (N, C, H, W) relu(f)
    g: Tensor  # (N, d, H*W)
    height: int
    width: int


def reduce_and_flatten(a: Tensor, reducer: Conv2d, dim: int) -> Tensor:
    """1x1 channel reduction followed by row-major spatial flattening."""
    c = a.shape[1]
    if dim >= c:
        raise ConfigError(f"reduce_and_flatten: d={dim} must be smaller than C={c}")
    if reducer.weight.shape != (dim, c, 1, 1):
        raise ConfigError(f"reduce_and_flatten: reducer weight {reducer.weight.shape} != ({dim}, {c}, 1, 1)")
    return dc.flatten(reducer(a), start_axis=2)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        stages = []
        c_in = 3
        for c_out, stride in zip(config.channels, config.strides):
            stages.append(Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1))
            for _ in range(config.convs_per_stage - 1):
                stages.append(Conv2d(c_out, c_out, 3, rng, stride=1, padding=1))
            c_in = c_out
        self.stages = stages
        self.reduce = Conv2d(c_in, config.dim, 1, rng)

    def trunk(self, images) -> Tensor:
        """Convolution stack up to (not including) the last activation."""
        x = dc.as_tensor(images)
        if x.ndim == 3:
            x = dc.reshape(x, (1,) + x.shape)
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (3, cfg.height, cfg.width):
            raise ContractError(
                f"backbone expects images of shape (N, 3, {cfg.height}, {cfg.width}), got {x.shape}")
        for i, conv in enumerate(self.stages):
            x = conv(x)
            if i < len(self.stages) - 1:
                x = dc.relu(x)
        return x

    def extract(self, images) -> FeatureMap:
        f = self.trunk(images)
        a = dc.relu(f)
        g = reduce_and_flatten(a, self.reduce, self.config.dim)
        return FeatureMap(f=f, a=a, g=g, height=f.shape[2], width=f.shape[3])

    __call__ = extract
