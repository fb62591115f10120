"""Dynamic filter block: frequency-domain filtering with an
input-conditioned mixture of learnable complex filter bases, followed by a
three-branch feed-forward network (identity + spatial depthwise conv +
frequency depthwise conv).

The filter applied to a feature map is K = sum_n w_n * F_n where the
mixture weights w = softmax(mlp(global_avg_pool(x))) depend on the input,
so different inputs are filtered differently. Bases are complex so the
filter can shift phase, and they start near all-pass (1 + noise) to make
early training close to an identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fourier import ComplexSpectrum, complex_multiply, irfft2, rfft2
from .ops import (MlpSpec, depthwise_conv2d, he_uniform, init_mlp, mlp_forward,
                  pool_spatial, slice_leading, softmax)
from .tensor import ShapeError, Tensor, make_node

BASIS_INIT_STD = 0.02


@dataclass
class FilterBank:
    """Learnable complex filter bases plus the weight-generating MLP.

    bases_re/bases_im: (N, C, H, W_f) with W_f = floor(W/2)+1.
    """

    bases_re: Tensor
    bases_im: Tensor
    mlp: list  # [(w, b), ...] mapping C -> C//4 -> N

    @property
    def n_bases(self) -> int:
        return self.bases_re.shape[0]

    @property
    def channels(self) -> int:
        return self.bases_re.shape[1]

    def named_tensors(self, prefix: str = ""):
        yield prefix + "bases_re", self.bases_re
        yield prefix + "bases_im", self.bases_im
        for i, (w, b) in enumerate(self.mlp):
            yield f"{prefix}mlp{i}.weight", w
            yield f"{prefix}mlp{i}.bias", b


@dataclass
class FfnParams:
    """Depthwise kernels of the spatial and frequency branches."""

    spatial_w: Tensor  # (C, k, k)
    spatial_b: Tensor
    freq_w: Tensor  # (2C, k, k), acting on the stacked [re; im] channels
    freq_b: Tensor

    def named_tensors(self, prefix: str = ""):
        yield prefix + "spatial.weight", self.spatial_w
        yield prefix + "spatial.bias", self.spatial_b
        yield prefix + "freq.weight", self.freq_w
        yield prefix + "freq.bias", self.freq_b


@dataclass
class DfbParams:
    bank: FilterBank
    ffn: FfnParams

    def named_tensors(self, prefix: str = ""):
        yield from self.bank.named_tensors(prefix + "bank.")
        yield from self.ffn.named_tensors(prefix + "ffn.")


def init_filter_bank(rng: np.random.Generator, n_bases: int, channels: int,
                     height: int, width: int, dtype=np.float64) -> FilterBank:
    if n_bases < 1:
        raise ShapeError("filter_bank", f"need at least one basis, got {n_bases}")
    wf = width // 2 + 1
    shape = (n_bases, channels, height, wf)
    re = 1.0 + rng.normal(0.0, BASIS_INIT_STD, size=shape)
    im = rng.normal(0.0, BASIS_INIT_STD, size=shape)
    mlp = init_mlp(rng, MlpSpec((channels, max(channels // 4, 1), n_bases)), dtype)
    return FilterBank(
        Tensor(re.astype(dtype), requires_grad=True),
        Tensor(im.astype(dtype), requires_grad=True),
        mlp,
    )


def init_ffn(rng: np.random.Generator, channels: int, spatial_kernel: int = 3,
             freq_kernel: int = 3, dtype=np.float64) -> FfnParams:
    if spatial_kernel % 2 == 0 or freq_kernel % 2 == 0:
        raise ShapeError("ffn", "kernel sizes must be odd")
    return FfnParams(
        Tensor(he_uniform(rng, (channels, spatial_kernel, spatial_kernel), spatial_kernel ** 2, dtype), requires_grad=True),
        Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
        Tensor(he_uniform(rng, (2 * channels, freq_kernel, freq_kernel), freq_kernel ** 2, dtype), requires_grad=True),
        Tensor(np.zeros(2 * channels, dtype=dtype), requires_grad=True),
    )


def init_dfb(rng: np.random.Generator, n_bases: int, channels: int,
             height: int, width: int, dtype=np.float64) -> DfbParams:
    return DfbParams(
        init_filter_bank(rng, n_bases, channels, height, width, dtype),
        init_ffn(rng, channels, dtype=dtype),
    )


def mix_bases(weights: Tensor, bases: Tensor) -> Tensor:
    """Per-sample convex combination of bases: (B, N) x (N, ...) -> (B, ...)."""
    if weights.ndim != 2 or weights.shape[1] != bases.shape[0]:
        raise ShapeError("mix_bases", f"weights {weights.shape} do not match {bases.shape[0]} bases")
    out = make_node(np.tensordot(weights.data, bases.data, axes=([1], [0])), (weights, bases), "mix_bases")
    reduce_axes = tuple(range(1, bases.ndim))

    def backward(g: np.ndarray) -> None:
        if weights.requires_grad:
            weights._accumulate(np.tensordot(g, bases.data, axes=(reduce_axes, reduce_axes)))
        if bases.requires_grad:
            bases._accumulate(np.tensordot(weights.data, g, axes=([0], [0])))

    out._backward = backward
    return out


def mixture_weights(bank: FilterBank, x: Tensor) -> Tensor:
    """softmax(mlp(global average pool)): positive, summing to one per sample."""
    x4 = x if x.ndim == 4 else x.reshape((1,) + x.shape)
    if x4.shape[1] != bank.channels:
        raise ShapeError("generate_filter", f"input has {x4.shape[1]} channels, bank expects {bank.channels}")
    pooled = pool_spatial(x4, "avg")
    return softmax(mlp_forward(pooled, bank.mlp), axis=-1)


def generate_filter(bank: FilterBank, x: Tensor) -> ComplexSpectrum:
    """Input-conditioned complex filter: softmax-weighted sum of the bases."""
    batched = x.ndim == 4
    h, w = x.shape[-2], x.shape[-1]
    if bank.bases_re.shape[2] != h or bank.bases_re.shape[3] != w // 2 + 1:
        raise ShapeError("generate_filter",
                         f"bank spectrum {bank.bases_re.shape[2:]} does not match input {h}x{w}")
    weights = mixture_weights(bank, x)
    k_re = mix_bases(weights, bank.bases_re)
    k_im = mix_bases(weights, bank.bases_im)
    if not batched:
        k_re = k_re.reshape(k_re.shape[1:])
        k_im = k_im.reshape(k_im.shape[1:])
    return ComplexSpectrum(k_re, k_im, h, w)


def apply_filter(x: Tensor, filt: ComplexSpectrum) -> Tensor:
    """Filter in the frequency domain: irfft2(K * rfft2(x)), real output."""
    spec = rfft2(x)
    if spec.re.shape != filt.re.shape:
        raise ShapeError("apply_filter", f"spectrum {spec.re.shape} vs filter {filt.re.shape}")
    return irfft2(complex_multiply(filt, spec))


def ffn(x: Tensor, params: FfnParams) -> Tensor:
    """Identity + spatial depthwise conv + frequency depthwise conv, summed.

    The frequency branch convolves the 2C-channel [re; im] stack depthwise;
    since depthwise kernels never mix channels, it is applied as two
    separate convolutions over the halves of the same weight tensor.
    """
    spatial = depthwise_conv2d(x, params.spatial_w, params.spatial_b, padding="same")
    spec = rfft2(x)
    c = x.shape[-3]
    mixed_re = depthwise_conv2d(spec.re, slice_leading(params.freq_w, 0, c),
                                slice_leading(params.freq_b, 0, c), padding="same")
    mixed_im = depthwise_conv2d(spec.im, slice_leading(params.freq_w, c, 2 * c),
                                slice_leading(params.freq_b, c, 2 * c), padding="same")
    freq = irfft2(ComplexSpectrum(mixed_re, mixed_im, spec.height, spec.width))
    return x + spatial + freq


def dfb_forward(x: Tensor, params: DfbParams) -> Tensor:
    """Dynamic filtering followed by the feed-forward network."""
    return ffn(apply_filter(x, generate_filter(params.bank, x)), params.ffn)
