"""Fixed high-pass filters that expose local noise residuals.

Three classic 5x5 residual kernels (a second-order derivative kernel, a
square Laplacian-style kernel, and a first-order horizontal difference), each
summing to zero so flat image regions map to zero response.  The kernels are
constants: they are convolved with the input but never trained.

Two wrappers:

* ``ChannelwiseHpf`` filters every input channel independently with every
  kernel, so C input channels become 3*C residual channels and no
  cross-channel mixing occurs.
* ``PlainHpf`` is the conventional alternative kept for ablations: each
  kernel is replicated across all input channels, which sums the per-channel
  responses and yields exactly 3 output channels.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, conv2d, reshape

# second-order derivative residual, normalized by 1/12
SECOND_ORDER_KERNEL = np.array([
    [-1,  2,  -2,  2, -1],
    [ 2, -6,   8, -6,  2],
    [-2,  8, -12,  8, -2],
    [ 2, -6,   8, -6,  2],
    [-1,  2,  -2,  2, -1],
], dtype=np.float64) / 12.0

# 3x3 square residual embedded in the 5x5 frame, normalized by 1/4
SQUARE_KERNEL = np.array([
    [0,  0,  0,  0, 0],
    [0, -1,  2, -1, 0],
    [0,  2, -4,  2, 0],
    [0, -1,  2, -1, 0],
    [0,  0,  0,  0, 0],
], dtype=np.float64) / 4.0

# first-order horizontal difference: right neighbor minus center
FIRST_ORDER_KERNEL = np.array([
    [0, 0,  0, 0, 0],
    [0, 0,  0, 0, 0],
    [0, 0, -1, 1, 0],
    [0, 0,  0, 0, 0],
    [0, 0,  0, 0, 0],
], dtype=np.float64)

KERNEL_SIZE = 5
PAD = KERNEL_SIZE // 2  # "same" padding for dilation 1
NUM_KERNELS = 3


def kernel_bank(dtype=np.float32) -> np.ndarray:
    """The three residual kernels stacked as a (3, 1, 5, 5) convolution bank.

    Built from the float64 master constants and cast once, so a float64 bank
    keeps full precision instead of inheriting float32 rounding.
    """
    return np.stack([SECOND_ORDER_KERNEL, SQUARE_KERNEL,
                     FIRST_ORDER_KERNEL])[:, None].astype(dtype)


class ChannelwiseHpf:
    """Apply all 3 residual kernels to each channel independently.

    Input (n, C, h, w) -> output (n, 3*C, h, w).  Output channel ordering is
    channel-major: source channel c contributes output channels
    [3*c, 3*c + 1, 3*c + 2], one per kernel in bank order.  Spatial dims are
    preserved (zero padding 2).  Gradients flow through to the input; the
    kernels themselves are frozen.
    """

    def __init__(self, dtype=np.float32):
        self.bank = Tensor(kernel_bank(dtype), requires_grad=False)

    def out_channels(self, in_channels: int) -> int:
        return NUM_KERNELS * in_channels

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        flat = reshape(x, (n * c, 1, h, w))
        res = conv2d(flat, self.bank, padding=PAD)     # (n*c, 3, h, w)
        return reshape(res, (n, NUM_KERNELS * c, h, w))


class PlainHpf:
    """Conventional high-pass layer: each kernel spans all input channels.

    The (3, C, 5, 5) kernel replicates every residual kernel across the C
    input channels, so each output channel is the kernel response summed over
    channels.  Input (n, C, h, w) -> output (n, 3, h, w).
    """

    def __init__(self, in_channels: int, dtype=np.float32):
        self.in_channels = in_channels
        bank = np.repeat(kernel_bank(dtype), in_channels, axis=1)
        self.bank = Tensor(bank, requires_grad=False)

    def out_channels(self, in_channels: int) -> int:
        return NUM_KERNELS

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"PlainHpf built for {self.in_channels} channels, "
                             f"got {x.shape[1]}")
        return conv2d(x, self.bank, padding=PAD)
