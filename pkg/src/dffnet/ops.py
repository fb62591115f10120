"""Differentiable neural primitives: convolutions, linear layers, relu,
softmax, pooling, and channel shuffle.

Every op accepts an optional leading batch axis with identical per-sample
semantics. Convolution is cross-correlation (no kernel flip) with zero
"same" padding by default. Backward passes decompose convolutions over
kernel offsets, which keeps peak memory at one input-sized slice instead
of a full im2col buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_node


@dataclass(frozen=True)
class ConvSpec:
    """Shape contract for a convolution layer."""

    in_channels: int
    out_channels: int
    kernel: tuple  # (kh, kw) or (kd, kh, kw)
    stride: tuple = ()  # defaults to all-ones
    padding: "str | tuple" = "same"
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError("conv_spec", f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise ShapeError("conv_spec", f"'same' padding needs odd kernel, got {self.kernel}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths of a fully-connected stack with relu between layers."""

    widths: tuple

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ShapeError("mlp_spec", f"need at least 2 widths, got {self.widths}")


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_conv(rng: np.random.Generator, spec: ConvSpec, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Fan-in scaled uniform weights and zero bias for a conv layer."""
    cin_per_group = spec.in_channels // spec.groups
    fan_in = cin_per_group * int(np.prod(spec.kernel))
    if spec.groups == spec.in_channels and spec.out_channels == spec.in_channels:
        shape = (spec.in_channels,) + tuple(spec.kernel)  # depthwise
    elif spec.groups == 1:
        shape = (spec.out_channels, spec.in_channels) + tuple(spec.kernel)
    else:
        raise ShapeError("init_conv", f"groups must be 1 or in_channels, got {spec.groups}")
    w = Tensor(he_uniform(rng, shape, fan_in, dtype), requires_grad=True)
    b = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
    return w, b


def init_mlp(rng: np.random.Generator, spec: MlpSpec, dtype=np.float64) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for d_in, d_out in zip(spec.widths[:-1], spec.widths[1:]):
        w = Tensor(he_uniform(rng, (d_out, d_in), d_in, dtype), requires_grad=True)
        b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
        layers.append((w, b))
    return layers


def _ensure_batched(x: Tensor, batched_ndim: int, op: str) -> tuple[Tensor, bool]:
    if x.ndim == batched_ndim:
        return x, False
    if x.ndim == batched_ndim - 1:
        return x.reshape((1,) + x.shape), True
    raise ShapeError(op, f"expected {batched_ndim - 1} or {batched_ndim} dims, got shape {x.shape}")


def _resolve_padding(padding, kernel: tuple) -> tuple:
    if padding == "same":
        if any(k % 2 == 0 for k in kernel):
            raise ShapeError("conv", f"'same' padding needs odd kernel, got {kernel}")
        return tuple(k // 2 for k in kernel)
    if padding == "valid":
        return tuple(0 for _ in kernel)
    if isinstance(padding, int):
        return tuple(padding for _ in kernel)
    return tuple(padding)


def _resolve_stride(stride, rank: int) -> tuple:
    if isinstance(stride, int):
        return tuple(stride for _ in range(rank))
    return tuple(stride)


# -- convolutions ----------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding="same") -> Tensor:
    """Dense 2-D cross-correlation. weight: (C_out, C_in, kh, kw)."""
    x4, squeeze = _ensure_batched(x, 4, "conv2d")
    c_out, c_in, kh, kw = weight.shape
    if x4.shape[1] != c_in:
        raise ShapeError("conv2d", f"input has {x4.shape[1]} channels, weight expects {c_in}")
    out = _conv_nd(x4, weight, bias, _resolve_stride(stride, 2),
                   _resolve_padding(padding, (kh, kw)), "conv2d")
    return out.reshape(out.shape[1:]) if squeeze else out


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride=1, padding="same") -> Tensor:
    """Dense 3-D cross-correlation. weight: (C_out, C_in, kd, kh, kw)."""
    x5, squeeze = _ensure_batched(x, 5, "conv3d")
    c_out, c_in = weight.shape[:2]
    if x5.shape[1] != c_in:
        raise ShapeError("conv3d", f"input has {x5.shape[1]} channels, weight expects {c_in}")
    out = _conv_nd(x5, weight, bias, _resolve_stride(stride, 3),
                   _resolve_padding(padding, weight.shape[2:]), "conv3d")
    return out.reshape(out.shape[1:]) if squeeze else out


def _conv_nd(x: Tensor, weight: Tensor, bias: Optional[Tensor],
             stride: tuple, padding: tuple, op: str) -> Tensor:
    """Shared dense conv over the trailing spatial axes (2 or 3 of them).

    Lowered to one GEMM over an im2col buffer; the buffer is kept for the
    backward pass, which is two more GEMMs plus a col2im scatter.
    """
    kernel = weight.shape[2:]
    nsp = len(kernel)
    spatial = x.shape[2:]
    for ax, (n, k, p) in enumerate(zip(spatial, kernel, padding)):
        if n + 2 * p < k:
            raise ShapeError(op, f"axis {ax}: size {n} + 2*pad {p} smaller than kernel {k}")
    pads = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    out_spatial = tuple((n + 2 * p - k) // s + 1
                        for n, k, p, s in zip(spatial, kernel, padding, stride))
    c_out, c_in = weight.shape[:2]
    batch = x.shape[0]
    k_total = int(np.prod(kernel))
    positions = int(np.prod(out_spatial))
    # channel-last padded copy so per-offset column fills are contiguous
    xpn = np.ascontiguousarray(np.moveaxis(np.pad(x.data, pads), 1, -1))

    def slices(offset):
        return tuple(slice(o, o + s * (m - 1) + 1, s)
                     for o, s, m in zip(offset, stride, out_spatial))

    offsets = list(np.ndindex(*kernel))
    cols = np.empty((batch,) + out_spatial + (k_total, c_in), dtype=x.dtype)
    for idx, off in enumerate(offsets):
        cols[..., idx, :] = xpn[(slice(None),) + slices(off) + (slice(None),)]
    cols_mat = cols.reshape(batch * positions, k_total * c_in)
    w_mat = weight.data.transpose((0,) + tuple(range(2, 2 + nsp)) + (1,)) \
        .reshape(c_out, k_total * c_in)
    y = cols_mat @ w_mat.T
    if bias is not None:
        y += bias.data
    y = np.ascontiguousarray(
        np.moveaxis(y.reshape((batch,) + out_spatial + (c_out,)), -1, 1))
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = make_node(y, parents, op)

    def backward(g: np.ndarray) -> None:
        g_mat = np.moveaxis(g, 1, -1).reshape(batch * positions, c_out)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0))
        if weight.requires_grad:
            gw = (g_mat.T @ cols_mat).reshape((c_out,) + kernel + (c_in,))
            weight._accumulate(np.moveaxis(gw, -1, 1))
        if x.requires_grad:
            g_cols = (g_mat @ w_mat).reshape((batch,) + out_spatial + (k_total, c_in))
            gxpn = np.zeros_like(xpn)
            for idx, off in enumerate(offsets):
                gxpn[(slice(None),) + slices(off) + (slice(None),)] += g_cols[..., idx, :]
            crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(padding, spatial))
            x._accumulate(np.moveaxis(gxpn[crop + (slice(None),)], -1, 1))

    out._backward = backward
    return out


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     padding="same") -> Tensor:
    """Per-channel 2-D cross-correlation. weight: (C, kh, kw).

    Uses the same column-buffer lowering as the dense conv, with the
    contraction kept per-channel.
    """
    x4, squeeze = _ensure_batched(x, 4, "depthwise_conv2d")
    c, kh, kw = weight.shape
    if x4.shape[1] != c:
        raise ShapeError("depthwise_conv2d", f"input has {x4.shape[1]} channels, weight expects {c}")
    ph, pw = _resolve_padding(padding, (kh, kw))
    h, w_sz = x4.shape[2:]
    ho, wo = h + 2 * ph - kh + 1, w_sz + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("depthwise_conv2d", f"kernel {kh}x{kw} too large for input {h}x{w_sz}")
    xp = np.pad(x4.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wd = weight.data
    b = x4.shape[0]
    cols = np.empty((b, c, ho, wo, kh * kw), dtype=x4.dtype)
    for idx, (p, q) in enumerate(np.ndindex(kh, kw)):
        cols[..., idx] = xp[:, :, p:p + ho, q:q + wo]
    y = np.einsum("bcpqk,ck->bcpq", cols, wd.reshape(c, kh * kw))
    if bias is not None:
        y += bias.data.reshape(1, c, 1, 1)
    parents = (x4, weight) if bias is None else (x4, weight, bias)
    out = make_node(y, parents, "depthwise_conv2d")

    def backward(g: np.ndarray) -> None:
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.einsum("bcpq,bcpqk->ck", g, cols)
            weight._accumulate(gw.reshape(c, kh, kw))
        if x4.requires_grad:
            g_cols = np.einsum("bcpq,ck->bcpqk", g, wd.reshape(c, kh * kw))
            gxp = np.zeros_like(xp)
            for idx, (p, q) in enumerate(np.ndindex(kh, kw)):
                gxp[:, :, p:p + ho, q:q + wo] += g_cols[..., idx]
            x4._accumulate(gxp[:, :, ph:ph + h, pw:pw + w_sz])

    out._backward = backward
    return out.reshape(out.shape[1:]) if squeeze else out


# -- dense layers and activations -------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map W x + b. weight: (d_out, d_in); x: (d_in,) or (B, d_in)."""
    x2, squeeze = _ensure_batched(x, 2, "linear")
    d_out, d_in = weight.shape
    if x2.shape[1] != d_in:
        raise ShapeError("linear", f"input width {x2.shape[1]} != weight width {d_in}")
    y = x2.data @ weight.data.T
    if bias is not None:
        y = y + bias.data
    parents = (x2, weight) if bias is None else (x2, weight, bias)
    out = make_node(y, parents, "linear")

    def backward(g: np.ndarray) -> None:
        if x2.requires_grad:
            x2._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x2.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    out._backward = backward
    return out.reshape(out.shape[1:]) if squeeze else out


def relu(x: Tensor) -> Tensor:
    out = make_node(np.maximum(x.data, 0), (x,), "relu")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = make_node(s, (x,), "softmax")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate(s * (g - inner))

    out._backward = backward
    return out


def mlp_forward(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Linear stack with relu between layers (none after the last)."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i + 1 < len(layers):
            x = relu(x)
    return x


# -- reductions --------------------------------------------------------------


def pool_spatial(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce each channel over all spatial positions: (..., C, H, W) -> (..., C)."""
    x4, squeeze = _ensure_batched(x, 4, "pool_spatial")
    b, c, h, w = x4.shape
    if kind == "avg":
        out = make_node(x4.data.mean(axis=(-2, -1)), (x4,), "pool_spatial_avg")

        def backward(g: np.ndarray) -> None:
            if x4.requires_grad:
                x4._accumulate(np.broadcast_to(g[..., None, None] / (h * w), x4.shape).astype(x4.dtype))

        out._backward = backward
    elif kind == "max":
        flat = x4.data.reshape(b, c, h * w)
        idx = flat.argmax(axis=-1)
        out = make_node(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], (x4,), "pool_spatial_max")

        def backward(g: np.ndarray) -> None:
            if x4.requires_grad:
                gx = np.zeros((b, c, h * w), dtype=x4.dtype)
                np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
                x4._accumulate(gx.reshape(x4.shape))

        out._backward = backward
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out.reshape(out.shape[1:]) if squeeze else out


def pool_channel(x: Tensor, kind: str = "avg") -> Tensor:
    """Reduce over channels at each position: (..., C, H, W) -> (..., 1, H, W)."""
    x4, squeeze = _ensure_batched(x, 4, "pool_channel")
    c = x4.shape[1]
    if kind == "avg":
        out = make_node(x4.data.mean(axis=1, keepdims=True), (x4,), "pool_channel_avg")

        def backward(g: np.ndarray) -> None:
            if x4.requires_grad:
                x4._accumulate(np.broadcast_to(g / c, x4.shape).astype(x4.dtype))

        out._backward = backward
    elif kind == "max":
        idx = x4.data.argmax(axis=1)
        out = make_node(np.take_along_axis(x4.data, idx[:, None], axis=1), (x4,), "pool_channel_max")

        def backward(g: np.ndarray) -> None:
            if x4.requires_grad:
                gx = np.zeros_like(x4.data)
                np.put_along_axis(gx, idx[:, None], g, axis=1)
                x4._accumulate(gx)

        out._backward = backward
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return out.reshape(out.shape[1:]) if squeeze else out


# -- channel plumbing --------------------------------------------------------


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """Source index of each output channel: out[i] = in[(i % g)*(C/g) + i//g]."""
    if channels % groups:
        raise ShapeError("channel_shuffle", f"{channels} channels not divisible by groups={groups}")
    i = np.arange(channels)
    return (i % groups) * (channels // groups) + i // groups


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    """Interleave channel groups: view as g x (C/g), transpose, flatten."""
    if x.ndim < 3:
        raise ShapeError("channel_shuffle", f"need (..., C, H, W), got shape {x.shape}")
    perm = shuffle_permutation(x.shape[-3], groups)
    inv = np.argsort(perm)
    out = make_node(np.take(x.data, perm, axis=-3), (x,), "channel_shuffle")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.take(g, inv, axis=-3))

    out._backward = backward
    return out


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (third from the end)."""
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        if t.ndim < 3:
            raise ShapeError("concat_channels", f"need (..., C, H, W), got shape {t.shape}")
    widths = [t.shape[-3] for t in tensors]
    out = make_node(np.concatenate([t.data for t in tensors], axis=-3), tuple(tensors), "concat_channels")
    bounds = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(_take_channel_range(g, lo, hi))

    out._backward = backward
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Select the channel range [start, stop) on axis -3."""
    if x.ndim < 3:
        raise ShapeError("slice_channels", f"need (..., C, H, W), got shape {x.shape}")
    if not (0 <= start < stop <= x.shape[-3]):
        raise ShapeError("slice_channels", f"range [{start}, {stop}) invalid for {x.shape[-3]} channels")
    out = make_node(np.ascontiguousarray(_take_channel_range(x.data, start, stop)), (x,), "slice_channels")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            _take_channel_range(gx, start, stop)[...] = g
            x._accumulate(gx)

    out._backward = backward
    return out


def _take_channel_range(arr: np.ndarray, lo: int, hi: int) -> np.ndarray:
    index = [slice(None)] * arr.ndim
    index[-3] = slice(lo, hi)
    return arr[tuple(index)]


def slice_leading(x: Tensor, start: int, stop: int) -> Tensor:
    """Select the range [start, stop) along the first axis."""
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError("slice_leading", f"range [{start}, {stop}) invalid for axis of {x.shape[0]}")
    out = make_node(np.ascontiguousarray(x.data[start:stop]), (x,), "slice_leading")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            x._accumulate(gx)

    out._backward = backward
    return out
