"""Dynamic two-stage feature refinement.

Local stage: a learned single-channel spatial mask in (0, 1) multiplies every
channel. Global stage: a per-sample channel kernel (softmax over channels,
generated from the pooled map) scales the original maps channel by channel,
and the two results are multiplied element-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Mode, Params
from .tensor import Tensor


@dataclass
class RefinerOutput:
    local_map: Tensor  # N x C x h x w
    kernels: Tensor  # N x C, rows on the simplex
    refined: Tensor  # N x C x h x w
    mask: Tensor  # N x 1 x h x w


# A full-scale random generator makes the initial channel softmax so peaked
# that most channels start muted; a small gain starts near-uniform but still
# input dependent.
KERNEL_INIT_GAIN = 0.1


def bottleneck_channels(c: int) -> int:
    return max(c // 4, 4)


def init_refiner(params: Params, channels: int, rng: np.random.Generator, hidden_1d: int = 4) -> None:
    cb = bottleneck_channels(channels)
    nn.init_conv_bn(params, "refiner.local.reduce", channels, cb, 3, rng)
    nn.init_conv(params, "refiner.local.mask", cb, 1, 3, rng)
    nn.init_conv_bn(params, "refiner.global.expand", 1, hidden_1d, 3, rng, dims=1)
    nn.init_conv(params, "refiner.global.kernel", hidden_1d, 1, 3, rng, dims=1, gain=KERNEL_INIT_GAIN)


def local_enhance(f: Tensor, params: Params, mode: Mode) -> tuple[Tensor, Tensor]:
    if f.ndim != 4 or min(f.shape[2:]) < 3:
        raise T.ShapeError(f"local enhancement needs N x C x h x w with h, w >= 3, got {f.shape}")
    hidden = nn.conv_bn_relu_2d(f, params, "refiner.local.reduce", mode)
    mask = nn.conv_sigmoid_2d(hidden, params, "refiner.local.mask")
    return mask, T.hadamard(f, mask)


def generate_kernels(f: Tensor, params: Params, mode: Mode) -> Tensor:
    n, c = f.shape[:2]
    if c < 3:
        raise T.ShapeError(f"kernel generation needs at least 3 channels, got {c}")
    v = T.reshape(T.adaptive_avg_pool(f, (1, 1)), (n, 1, c))
    hidden = nn.conv_bn_relu_1d(v, params, "refiner.global.expand", mode)
    k = nn.conv_softmax_1d(hidden, params, "refiner.global.kernel")
    return T.reshape(k, (n, c))


def refine(f: Tensor, params: Params, mode: Mode) -> RefinerOutput:
    mask, local = local_enhance(f, params, mode)
    k = generate_kernels(f, params, mode)
    n, c = f.shape[:2]
    # per-sample depthwise 1x1 convolution == channel scaling
    global_ = T.hadamard(f, T.reshape(k, (n, c, 1, 1)))
    return RefinerOutput(local, k, T.hadamard(local, global_), mask)
