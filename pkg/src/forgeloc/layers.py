"""Trainable layer primitives shared by the attention module and the network."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, conv2d


class Conv2dLayer:
    """Convolution with trainable kernel and bias.

    Weights use He initialization (std = sqrt(2 / fan_in)); biases start at
    zero.  ``padding=None`` selects "same" padding, ``dilation*(k-1)//2``,
    which preserves spatial dims at stride 1 for odd kernels.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, dilation: int = 1,
                 padding=None, dtype=np.float32):
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        self.stride = stride
        self.dilation = dilation
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, (out_channels, in_channels,
                                  kernel_size, kernel_size))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype),
                           requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      dilation=self.dilation, padding=self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def prefix_params(prefix: str, params):
    return [(f"{prefix}.{name}", t) for name, t in params]
