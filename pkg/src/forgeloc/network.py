"""Two-stage localization network.

The coarse net maps an RGB image to a rough tamper mask plus a compact
feature map; the refined net consumes those features and emits the final
mask.  Both stages share the same encoder/decoder skeleton:

  front end (noise features) -> three VGG-style conv blocks with 2x2 pooling
  after the first two -> four-layer dilated bridge (rates 2, 4, 8, 16) ->
  two decoder blocks fed by skip concatenations -> heads.

Encoder block i carries nbf * 2^i filters (i = 1..3); decoder blocks carry
nbf * 2 and nbf.  Skips: the pooled first-block output joins the last decoder
block, the pooled second-block output joins the first decoder block, and the
channel reduction happens inside the decoder convs (reduce after concat).
Mask heads are 7x7 sigmoid convolutions; the coarse net adds a linear 1x1
head producing the k-channel feature connection.  The refined net inserts the
dual attention module right after its dilated bridge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attention import ForgeryAttention
from .autograd import (Tensor, concat_channels, conv2d, maxpool2d, relu,
                       sigmoid, upsample_nearest)
from .hpf import ChannelwiseHpf, PlainHpf
from .layers import Conv2dLayer, prefix_params

FEATURE_MODES = ("cwhpf", "hpf", "rgb")
DILATION_RATES = (2, 4, 8, 16)


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``feature_mode`` selects the front end of each stage: "cwhpf" filters
    every channel with the full high-pass bank (3*C noise channels), "hpf"
    uses the conventional 3-channel high-pass layer, "rgb" feeds pixels
    straight through.  ``attention_enabled=False`` removes the attention
    module from the refined net; ``coarse_enabled=False`` collapses the model
    to a single refined stage that reads the image directly.
    """

    nbf: int = 32
    k: int = 16
    convs_per_block: int = 3
    input_size: tuple = (64, 64)
    coarse_feature_mode: str = "cwhpf"
    refined_feature_mode: str = "cwhpf"
    attention_enabled: bool = True
    coarse_enabled: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.nbf < 4:
            raise ValueError(f"nbf must be >= 4, got {self.nbf}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.convs_per_block < 1:
            raise ValueError("convs_per_block must be >= 1")
        h, w = self.input_size
        if h % 4 or w % 4:
            raise ValueError(f"input dims must be divisible by 4 "
                             f"(two pooling stages), got {h}x{w}")
        for mode in (self.coarse_feature_mode, self.refined_feature_mode):
            if mode not in FEATURE_MODES:
                raise ValueError(f"unknown feature mode {mode!r}, "
                                 f"expected one of {FEATURE_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def with_feature_mode(self, mode: str) -> "ModelConfig":
        return replace(self, coarse_feature_mode=mode, refined_feature_mode=mode)

    def to_dict(self) -> dict:
        return {
            "nbf": self.nbf, "k": self.k,
            "convs_per_block": self.convs_per_block,
            "input_size": list(self.input_size),
            "coarse_feature_mode": self.coarse_feature_mode,
            "refined_feature_mode": self.refined_feature_mode,
            "attention_enabled": self.attention_enabled,
            "coarse_enabled": self.coarse_enabled,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


class VggBlock:
    """Stack of same-padded 3x3 convolutions with rectifier activations."""

    def __init__(self, in_channels: int, filters: int, convs: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.convs = []
        c = in_channels
        for _ in range(convs):
            self.convs.append(Conv2dLayer(c, filters, 3, rng, dtype=dtype))
            c = filters

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = relu(conv(x))
        return x

    def parameters(self):
        out = []
        for i, conv in enumerate(self.convs):
            out += prefix_params(f"conv{i}", conv.parameters())
        return out


class DilatedBridge:
    """Four same-padded 3x3 convolutions with dilation rates 2, 4, 8, 16.

    Channel count is preserved; the stacked rates widen the receptive field
    to 1 + 2*(2+4+8+16) = 61 pixels versus 9 for an undilated stack.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.convs = [Conv2dLayer(channels, channels, 3, rng, dilation=d,
                                  dtype=dtype)
                      for d in DILATION_RATES]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = relu(conv(x))
        return x

    def parameters(self):
        out = []
        for rate, conv in zip(DILATION_RATES, self.convs):
            out += prefix_params(f"dilated{rate}", conv.parameters())
        return out


class _Stage:
    """Shared encoder/decoder skeleton of both stages."""

    def __init__(self, in_channels: int, feature_mode: str, cfg: ModelConfig,
                 rng: np.random.Generator, with_attention: bool,
                 with_feature_head: bool):
        nbf, dtype = cfg.nbf, cfg.np_dtype
        self.feature_mode = feature_mode
        self.in_channels = in_channels
        if feature_mode == "cwhpf":
            self.front = ChannelwiseHpf(dtype=dtype)
            v1_in = 3 * in_channels
        elif feature_mode == "hpf":
            self.front = PlainHpf(in_channels, dtype=dtype)
            v1_in = 3
        else:
            self.front = None
            v1_in = in_channels

        cpb = cfg.convs_per_block
        self.enc1 = VggBlock(v1_in, 2 * nbf, cpb, rng, dtype)
        self.enc2 = VggBlock(2 * nbf, 4 * nbf, cpb, rng, dtype)
        self.enc3 = VggBlock(4 * nbf, 8 * nbf, cpb, rng, dtype)
        self.bridge = DilatedBridge(8 * nbf, rng, dtype)
        self.attention = (ForgeryAttention(8 * nbf, rng, dtype)
                          if with_attention else None)
        self.dec1 = VggBlock(12 * nbf, 2 * nbf, cpb, rng, dtype)  # bridge + skip2
        self.dec2 = VggBlock(4 * nbf, nbf, cpb, rng, dtype)       # up + skip1
        self.mask_head = Conv2dLayer(nbf, 1, 7, rng, dtype=dtype)
        self.feature_head = (Conv2dLayer(nbf, cfg.k, 1, rng, dtype=dtype)
                             if with_feature_head else None)

    def __call__(self, x: Tensor, record: Optional[dict] = None):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"stage expects {self.in_channels} input channels, "
                             f"got {x.shape[1]}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"input dims must be divisible by 4, "
                             f"got {x.shape[2]}x{x.shape[3]}")
        if self.front is not None:
            x = self.front(x)
        v1 = self.enc1(x)
        p1 = maxpool2d(v1)
        v2 = self.enc2(p1)
        p2 = maxpool2d(v2)
        v3 = self.enc3(p2)
        b = self.bridge(v3)
        if self.attention is not None:
            b = self.attention(b, record=record)
        d1 = self.dec1(concat_channels([b, p2]))
        d2 = self.dec2(concat_channels([upsample_nearest(d1), p1]))
        top = upsample_nearest(d2)
        mask = sigmoid(self.mask_head(top))
        feat = self.feature_head(top) if self.feature_head is not None else None
        return mask, feat

    def parameters(self):
        out = prefix_params("enc1", self.enc1.parameters())
        out += prefix_params("enc2", self.enc2.parameters())
        out += prefix_params("enc3", self.enc3.parameters())
        out += prefix_params("bridge", self.bridge.parameters())
        if self.attention is not None:
            out += prefix_params("attention", self.attention.parameters())
        out += prefix_params("dec1", self.dec1.parameters())
        out += prefix_params("dec2", self.dec2.parameters())
        out += prefix_params("mask_head", self.mask_head.parameters())
        if self.feature_head is not None:
            out += prefix_params("feature_head", self.feature_head.parameters())
        return out

    def buffers(self):
        out = []
        if self.front is not None:
            out.append(("front.bank", self.front.bank))
        if self.attention is not None:
            out += prefix_params("attention", self.attention.buffers())
        return out


class CoarseToFineModel:
    """Full model: coarse stage -> k-channel feature connection -> refined stage.

    ``forward`` returns (coarse_mask, refined_mask); the coarse mask is None
    when the coarse stage is disabled.  Masks are (n, 1, h, w) with values
    strictly inside (0, 1).  Inference does not mutate parameters, so
    concurrent forward passes are safe; training steps require exclusive
    access.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence([seed]))
        if cfg.coarse_enabled:
            self.coarse = _Stage(3, cfg.coarse_feature_mode, cfg, rng,
                                 with_attention=False, with_feature_head=True)
            refined_in = cfg.k
        else:
            self.coarse = None
            refined_in = 3
        self.refined = _Stage(refined_in, cfg.refined_feature_mode, cfg, rng,
                              with_attention=cfg.attention_enabled,
                              with_feature_head=False)

    def forward(self, image: Tensor, record: Optional[dict] = None):
        if self.coarse is not None:
            coarse_mask, feat = self.coarse(image, record=None)
            refined_mask, _ = self.refined(feat, record=record)
            if record is not None:
                record["coarse_mask"] = coarse_mask.data.copy()
        else:
            coarse_mask = None
            refined_mask, _ = self.refined(image, record=record)
        if record is not None:
            record["refined_mask"] = refined_mask.data.copy()
        return coarse_mask, refined_mask

    __call__ = forward

    def parameters(self):
        out = []
        if self.coarse is not None:
            out += prefix_params("coarse", self.coarse.parameters())
        out += prefix_params("refined", self.refined.parameters())
        return out

    def buffers(self):
        out = []
        if self.coarse is not None:
            out += prefix_params("coarse", self.coarse.buffers())
        out += prefix_params("refined", self.refined.buffers())
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.parameters())
