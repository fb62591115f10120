"""Spectral-spatial adaptive fusion block.

One stream (the spectral-rich one) gets channel attention, the other (the
spatial-rich one) gets spatial attention; the two enhanced maps are
concatenated, interleaved channel-by-channel with a groups=2 shuffle, and
reduced back to C channels by a 1x1 convolution. Both attentions are
additive residuals with no sigmoid gate, so a zero-parameter block is an
exact no-op on both streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (ConvSpec, channel_shuffle, concat_channels, conv2d, init_conv,
                  init_mlp, MlpSpec, linear, pool_channel, pool_spatial, relu)
from .tensor import ShapeError, Tensor

SPATIAL_KERNEL = 5
SQUEEZE_RATIO = 4


@dataclass
class SsafbParams:
    """Channel-attention MLP, spatial-attention conv, and fusion conv."""

    ca_w1: Tensor  # (C/4, C)
    ca_b1: Tensor
    ca_w2: Tensor  # (C, C/4)
    ca_b2: Tensor
    sa_w: Tensor  # (1, 2, 5, 5)
    sa_b: Tensor
    fuse_w: Tensor  # (C, 2C, 1, 1)
    fuse_b: Tensor

    def named_tensors(self, prefix: str = ""):
        yield prefix + "ca.w1", self.ca_w1
        yield prefix + "ca.b1", self.ca_b1
        yield prefix + "ca.w2", self.ca_w2
        yield prefix + "ca.b2", self.ca_b2
        yield prefix + "sa.weight", self.sa_w
        yield prefix + "sa.bias", self.sa_b
        yield prefix + "fuse.weight", self.fuse_w
        yield prefix + "fuse.bias", self.fuse_b


def init_ssafb(rng: np.random.Generator, channels: int, dtype=np.float64) -> SsafbParams:
    if channels % SQUEEZE_RATIO:
        raise ShapeError("ssafb", f"channels {channels} not divisible by squeeze ratio {SQUEEZE_RATIO}")
    (w1, b1), (w2, b2) = init_mlp(
        rng, MlpSpec((channels, channels // SQUEEZE_RATIO, channels)), dtype)
    sa_w, sa_b = init_conv(rng, ConvSpec(2, 1, (SPATIAL_KERNEL, SPATIAL_KERNEL)), dtype)
    fuse_w, fuse_b = init_conv(rng, ConvSpec(2 * channels, channels, (1, 1)), dtype)
    return SsafbParams(w1, b1, w2, b2, sa_w, sa_b, fuse_w, fuse_b)


def channel_attention(x: Tensor, params: SsafbParams) -> Tensor:
    """x + per-channel additive attention from the pooled channel descriptor."""
    x4 = x if x.ndim == 4 else x.reshape((1,) + x.shape)
    pooled = pool_spatial(x4, "avg")  # (B, C)
    att = linear(relu(linear(pooled, params.ca_w1, params.ca_b1)), params.ca_w2, params.ca_b2)
    out = x4 + att.reshape(att.shape + (1, 1))
    return out if x.ndim == 4 else out.reshape(out.shape[1:])


def spatial_attention(x: Tensor, params: SsafbParams) -> Tensor:
    """x + one attention map shared across channels, from pooled-channel stats."""
    x4 = x if x.ndim == 4 else x.reshape((1,) + x.shape)
    stats = concat_channels([pool_channel(x4, "avg"), pool_channel(x4, "max")])  # (B, 2, H, W)
    att = conv2d(stats, params.sa_w, params.sa_b, padding="same")  # (B, 1, H, W)
    out = x4 + att
    return out if x.ndim == 4 else out.reshape(out.shape[1:])


def fuse(f_h: Tensor, f_x: Tensor, params: SsafbParams) -> Tensor:
    """Concatenate, interleave the two modalities channel-wise, reduce to C."""
    if f_h.shape != f_x.shape:
        raise ShapeError("fuse", f"stream shapes differ: {f_h.shape} vs {f_x.shape}")
    mixed = channel_shuffle(concat_channels([f_h, f_x]), groups=2)
    return conv2d(mixed, params.fuse_w, params.fuse_b, padding="same")


def ssafb_forward(f_h: Tensor, f_x: Tensor, params: SsafbParams):
    """Returns (h_next, x_next, fused): both streams plus the shared residual."""
    fused = fuse(channel_attention(f_h, params), spatial_attention(f_x, params), params)
    return f_h + fused, f_x + fused, fused


def zero_ssafb(channels: int, dtype=np.float64) -> SsafbParams:
    """All-zero parameters; makes the block an exact no-op (regression anchor)."""
    z = lambda *shape: Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    r = channels // SQUEEZE_RATIO
    return SsafbParams(
        z(r, channels), z(r), z(channels, r), z(channels),
        z(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL), z(1),
        z(channels, 2 * channels, 1, 1), z(channels),
    )
