"""Dual attention over high-pass noise features.

Two branches score pairwise similarity with a sigmoid gate (no softmax
normalization): the spatial branch relates pixel positions, the channel
branch relates feature channels.  Each branch adds its weighted features back
onto the input through a learnable scalar that starts at zero, so a freshly
built module passes features through unchanged before fusion.  Branch outputs
are summed and mixed by a final 1x1 convolution.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autograd import (Tensor, add, matmul, reshape, scale_mul, sigmoid,
                       transpose_last2)
from .hpf import ChannelwiseHpf
from .layers import Conv2dLayer, prefix_params


def _to_tokens(x: Tensor):
    """(n, C, h, w) -> (n, h*w, C): one row per pixel position."""
    n, c, h, w = x.shape
    return transpose_last2(reshape(x, (n, c, h * w)))


def _from_tokens(tok: Tensor, shape):
    """(n, h*w, C) -> (n, C, h, w)."""
    return reshape(transpose_last2(tok), shape)


class SpatialAttentionBranch:
    """Position-pair attention on noise features.

    The input is lifted to noise space (channel-wise high-pass, then a 1x1
    conv back to C channels), projected by query/key/value 1x1 convs, and a
    sigmoid-gated (h*w)x(h*w) similarity map reweights the value features.
    Output = scale * attended + input, with scale initialized to 0.
    """

    def __init__(self, channels: int, hpf: ChannelwiseHpf,
                 rng: np.random.Generator, dtype=np.float32):
        self.hpf = hpf
        self.noise_conv = Conv2dLayer(3 * channels, channels, 1, rng, dtype=dtype)
        self.query_conv = Conv2dLayer(channels, channels, 1, rng, dtype=dtype)
        self.key_conv = Conv2dLayer(channels, channels, 1, rng, dtype=dtype)
        self.value_conv = Conv2dLayer(channels, channels, 1, rng, dtype=dtype)
        self.scale = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, feat: Tensor, record: Optional[dict] = None) -> Tensor:
        noise = self.noise_conv(self.hpf(feat))
        q = _to_tokens(self.query_conv(noise))      # (n, hw, C)
        k = _to_tokens(self.key_conv(noise))
        v = _to_tokens(self.value_conv(noise))
        sim = sigmoid(matmul(k, transpose_last2(q)))  # (n, hw, hw)
        attended = _from_tokens(matmul(sim, v), feat.shape)
        out = add(scale_mul(self.scale, attended), feat)
        if record is not None:
            record["spatial_similarity"] = sim.data.copy()
            record["spatial_out"] = out.data.copy()
        return out

    def parameters(self):
        out = prefix_params("noise_conv", self.noise_conv.parameters())
        out += prefix_params("query_conv", self.query_conv.parameters())
        out += prefix_params("key_conv", self.key_conv.parameters())
        out += prefix_params("value_conv", self.value_conv.parameters())
        out.append(("scale", self.scale))
        return out


class ChannelAttentionBranch:
    """Channel-pair attention on noise features.

    Noise features are flattened to (h*w)xC tokens; the CxC sigmoid gram
    matrix reweights channels by right-multiplication.  Output =
    scale * attended + input, with scale initialized to 0.
    """

    def __init__(self, channels: int, hpf: ChannelwiseHpf,
                 rng: np.random.Generator, dtype=np.float32):
        self.hpf = hpf
        self.noise_conv = Conv2dLayer(3 * channels, channels, 1, rng, dtype=dtype)
        self.scale = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, feat: Tensor, record: Optional[dict] = None) -> Tensor:
        tok = _to_tokens(self.noise_conv(self.hpf(feat)))     # (n, hw, C)
        gram = sigmoid(matmul(transpose_last2(tok), tok))     # (n, C, C)
        attended = _from_tokens(matmul(tok, gram), feat.shape)
        out = add(scale_mul(self.scale, attended), feat)
        if record is not None:
            record["channel_similarity"] = gram.data.copy()
            record["channel_out"] = out.data.copy()
        return out

    def parameters(self):
        out = prefix_params("noise_conv", self.noise_conv.parameters())
        out.append(("scale", self.scale))
        return out


class ForgeryAttention:
    """Sum of the two branch outputs, fused by a 1x1 convolution.

    Output shape equals input shape (n, C, h, w).  Pass a dict as ``record``
    to capture the similarity matrices and branch outputs (as numpy arrays)
    for visualization.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.channels = channels
        hpf = ChannelwiseHpf(dtype=dtype)
        self.hpf = hpf
        self.spatial = SpatialAttentionBranch(channels, hpf, rng, dtype=dtype)
        self.channel = ChannelAttentionBranch(channels, hpf, rng, dtype=dtype)
        self.fuse_conv = Conv2dLayer(channels, channels, 1, rng, dtype=dtype)

    def __call__(self, feat: Tensor, record: Optional[dict] = None) -> Tensor:
        out = self.fuse_conv(add(self.spatial(feat, record),
                                 self.channel(feat, record)))
        if record is not None:
            record["fused_out"] = out.data.copy()
        return out

    def parameters(self):
        out = prefix_params("spatial", self.spatial.parameters())
        out += prefix_params("channel", self.channel.parameters())
        out += prefix_params("fuse_conv", self.fuse_conv.parameters())
        return out

    def buffers(self):
        return [("hpf.bank", self.hpf.bank)]
