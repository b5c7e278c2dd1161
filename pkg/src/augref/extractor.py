from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .nn import Mode, Params
from .tensor import Tensor


@dataclass
class FeatureBatch:
    maps: Tensor  # N x C x h x w
    embeddings: Tensor  # N x D, unit rows (or zero)
    labels: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self):
        return self.maps.shape[0]


class Backbone(Protocol):
    out_channels: int

    def init_params(self, params: Params, rng: np.random.Generator) -> None: ...

    def __call__(self, images: Tensor, params: Params, mode: Mode) -> Tensor: ...


class SmallCNN:
    """Three stride-2 conv-BN-ReLU stages; an S x S image becomes S/8 x S/8 maps."""

    min_size = 16

    def __init__(self, channels: Sequence[int] = (16, 32, 64), in_channels: int = 1):
        self.channels = tuple(channels)
        self.in_channels = in_channels

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    def init_params(self, params: Params, rng: np.random.Generator) -> None:
        c_in = self.in_channels
        for i, c in enumerate(self.channels):
            nn.init_conv_bn(params, f"extractor.stage{i + 1}", c_in, c, 3, rng)
            c_in = c

    def __call__(self, images: Tensor, params: Params, mode: Mode) -> Tensor:
        x = images
        for i in range(len(self.channels)):
            x = nn.conv_bn_relu_2d(x, params, f"extractor.stage{i + 1}", mode, stride=2, padding=1)
        return x


DEFAULT_BACKBONE = SmallCNN()


def embed(maps: Tensor, similarity: str = "pooled") -> Tensor:
    """Unit-norm similarity embeddings: pooled channel vectors or flattened maps."""
    n = maps.shape[0]
    if similarity == "pooled":
        v = T.reshape(T.adaptive_avg_pool(maps, (1, 1)), (n, maps.shape[1]))
    elif similarity == "flat":
        v = T.reshape(maps, (n, -1))
    else:
        raise ValueError(f"unknown similarity features {similarity!r}")
    return T.l2_normalize(v, axis=1)


def extract(
    images: Tensor,
    params: Params,
    mode: Mode,
    labels=None,
    ids=None,
    backbone: Backbone = DEFAULT_BACKBONE,
    similarity: str = "pooled",
) -> FeatureBatch:
    if images.ndim != 4:
        raise T.ShapeError(f"images must be N x C x S x S, got {images.shape}")
    n = images.shape[0]
    if n < 1:
        raise ValueError("empty image batch")
    if min(images.shape[2:]) < getattr(backbone, "min_size", 1):
        raise ValueError(f"image size {images.shape[2:]} below minimum {backbone.min_size}")
    labels = np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape}")
    if np.any(labels < 0):
        raise ValueError("labels must be nonnegative")
    maps = backbone(images, params, mode)
    return FeatureBatch(maps, embed(maps, similarity), labels, list(ids) if ids is not None else list(range(n)))
