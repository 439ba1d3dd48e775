"""Residual convolutional block shared by the backbone and template branches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

LEAKY_SLOPE = 0.01


@dataclass
class ConvBlockParams:
    """Two padded 3x3 convs with biases; optional 1x1 projection on the skip.

    With projection=None the skip path is the identity. A template branch
    declares a (zero-initialized) projection instead, so an untrained branch
    contributes exactly zero.
    """

    conv1: T.Tensor  # [C, C, 3, 3]
    bias1: T.Tensor  # [C, 1, 1]
    conv2: T.Tensor
    bias2: T.Tensor
    projection: T.Tensor | None = None  # [C, C, 1, 1]

    def named(self, prefix: str):
        out = [
            (f"{prefix}.conv1", self.conv1),
            (f"{prefix}.bias1", self.bias1),
            (f"{prefix}.conv2", self.conv2),
            (f"{prefix}.bias2", self.bias2),
        ]
        if self.projection is not None:
            out.append((f"{prefix}.projection", self.projection))
        return out


def conv_block(params: ConvBlockParams, x: T.Tensor, slope: float = LEAKY_SLOPE) -> T.Tensor:
    """y = leaky(conv2(leaky(conv1(x) + b1)) + b2) + skip(x); spatial size kept."""
    h = T.leaky_relu(T.add(T.conv2d(x, params.conv1, 1, 1), params.bias1), slope)
    h = T.leaky_relu(T.add(T.conv2d(h, params.conv2, 1, 1), params.bias2), slope)
    skip = x if params.projection is None else T.conv2d(x, params.projection)
    return T.add(h, skip)


def _fan_in_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv_block(
    channels: int,
    rng: np.random.Generator,
    dtype=np.float64,
    zero: bool = False,
    with_projection: bool = False,
) -> ConvBlockParams:
    """Fan-in-scaled uniform weights, zero biases; ``zero=True`` zeroes it all."""

    def kernel(shape):
        if zero:
            return T.Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
        return T.Tensor(_fan_in_uniform(rng, shape, dtype), requires_grad=True)

    c = channels
    proj = None
    if with_projection:
        proj = T.Tensor(np.zeros((c, c, 1, 1), dtype=dtype), requires_grad=True)
    return ConvBlockParams(
        conv1=kernel((c, c, 3, 3)),
        bias1=T.Tensor(np.zeros((c, 1, 1), dtype=dtype), requires_grad=True),
        conv2=kernel((c, c, 3, 3)),
        bias2=T.Tensor(np.zeros((c, 1, 1), dtype=dtype), requires_grad=True),
        projection=proj,
    )
