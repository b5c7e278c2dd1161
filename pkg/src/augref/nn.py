"""Composite blocks built from the tensor ops, plus parameter initialization.

Parameters live in one flat ``dict[str, Tensor]``. Each block reads its
weights under a name prefix, e.g. ``"stage1.conv.weight"``. Batch-norm running
statistics share the map but are buffers: never decayed, never updated by the
optimizer.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]

BUFFER_SUFFIXES = (".running_mean", ".running_var")


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def trainable(params: Params) -> dict[str, Tensor]:
    return {k: v for k, v in params.items() if not is_buffer(k)}


def _add(params: Params, name: str, value: np.ndarray, grad: bool = True):
    if name in params:
        raise KeyError(f"duplicate parameter name {name!r}")
    params[name] = Tensor(value, requires_grad=grad)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = math.prod(shape[1:])
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_conv(params: Params, prefix: str, c_in: int, c_out: int, k: int, rng, dims: int = 2, gain: float = 1.0):
    _add(params, f"{prefix}.weight", gain * he_uniform(rng, (c_out, c_in) + (k,) * dims))
    _add(params, f"{prefix}.bias", np.zeros(c_out))


def init_bn(params: Params, prefix: str, c: int):
    _add(params, f"{prefix}.gamma", np.ones(c))
    _add(params, f"{prefix}.beta", np.zeros(c))
    _add(params, f"{prefix}.running_mean", np.zeros(c), grad=False)
    _add(params, f"{prefix}.running_var", np.ones(c), grad=False)


def init_conv_bn(params: Params, prefix: str, c_in: int, c_out: int, k: int, rng, dims: int = 2):
    init_conv(params, f"{prefix}.conv", c_in, c_out, k, rng, dims)
    init_bn(params, f"{prefix}.bn", c_out)


def init_linear(params: Params, prefix: str, d_in: int, d_out: int, rng):
    # stored as D x K so logits = e @ W + b
    bound = math.sqrt(6.0 / d_in)
    _add(params, f"{prefix}.weight", rng.uniform(-bound, bound, size=(d_in, d_out)))
    _add(params, f"{prefix}.bias", np.zeros(d_out))


def _bn(x: Tensor, params: Params, prefix: str, mode: Mode) -> Tensor:
    return T.batchnorm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        params[f"{prefix}.running_mean"],
        params[f"{prefix}.running_var"],
        training=Mode(mode) is Mode.TRAIN,
    )


def conv_bn_relu_2d(
    x: Tensor, params: Params, prefix: str, mode: Mode, stride: int = 1, padding: int = 1
) -> Tensor:
    y = T.conv2d(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], stride, padding)
    return T.relu(_bn(y, params, f"{prefix}.bn", mode))


def conv_sigmoid_2d(x: Tensor, params: Params, prefix: str, padding: int = 1) -> Tensor:
    y = T.conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], 1, padding)
    return T.sigmoid(y)


def conv_bn_relu_1d(x: Tensor, params: Params, prefix: str, mode: Mode, padding: int = 1) -> Tensor:
    y = T.conv1d(x, params[f"{prefix}.conv.weight"], params[f"{prefix}.conv.bias"], 1, padding)
    return T.relu(_bn(y, params, f"{prefix}.bn", mode))


def conv_softmax_1d(x: Tensor, params: Params, prefix: str, padding: int = 1) -> Tensor:
    """Conv1d followed by a softmax over the length axis of every output channel."""
    y = T.conv1d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], 1, padding)
    return T.softmax(y, axis=-1)


def classify(embedding: Tensor, params: Params, prefix: str = "classifier") -> tuple[Tensor, Tensor]:
    w = params[f"{prefix}.weight"]
    if embedding.ndim != 2 or embedding.shape[1] != w.shape[0]:
        raise T.ShapeError(
            f"classifier expects width {w.shape[0]}, got embedding shape {embedding.shape}"
        )
    logits = T.add(T.matmul(embedding, w), params[f"{prefix}.bias"])
    return logits, T.softmax(logits, axis=1)
