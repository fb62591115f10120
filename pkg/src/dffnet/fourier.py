"""Differentiable 2-D real FFT over the trailing spatial axes.

Conventions: the forward transform is unnormalized,

    f(u, v) = sum_y sum_x  x(x, y) * exp(-j*2*pi*(u*x/W + v*y/H)),

and the inverse carries the 1/(H*W) factor. Because inputs are real, only
the half spectrum u in [0, floor(W/2)] is stored; the inverse Hermitian-
completes the missing columns and returns the real part, so the output is
real even when an arbitrary complex filter has been applied in between.

``naive_dft2`` is the test oracle: a direct summation of the definition,
kept deliberately independent of any FFT code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, make_node

NAIVE_DFT_MAX_PIXELS = 4096
# below this pixel count the transform runs as two cached matrix products,
# which beats pocketfft's generic path on the tiny prime-sized patches
MATRIX_DFT_MAX_PIXELS = 4096


@lru_cache(maxsize=32)
def _dft_kernel(h: int, w: int, single: bool):
    """Flattened transform matrix K[(y,x), (v,u)] = exp(-2j*pi*(vy/H + ux/W)).

    The forward map is x_flat @ K; the adjoint of the half-spectrum map is
    multiplication by K's (conjugate) transpose, and the real inverse is
    that adjoint applied to the mirror-mask-weighted spectrum over H*W.
    Stored as separate real/imag parts so everything runs as real GEMMs.
    """
    rtype = np.float32 if single else np.float64
    wf = w // 2 + 1
    a = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    b = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w))[:, :wf] / w)
    k = np.einsum("vy,xu->yxvu", a, b).reshape(h * w, h * wf)
    mask = np.ascontiguousarray(_mirror_multiplicity(h, w), dtype=rtype).reshape(-1)
    return (np.ascontiguousarray(k.real, dtype=rtype),
            np.ascontiguousarray(k.imag, dtype=rtype), mask)


def _use_matrices(h: int, w: int) -> bool:
    return h * w <= MATRIX_DFT_MAX_PIXELS


def _forward_half_parts(x: np.ndarray, h: int, w: int) -> tuple:
    """Half-spectrum forward transform of a real array (..., H, W) as (re, im)."""
    wf = w // 2 + 1
    if _use_matrices(h, w):
        k_re, k_im, _ = _dft_kernel(h, w, x.dtype == np.float32)
        flat = x.reshape(x.shape[:-2] + (h * w,))
        shape = x.shape[:-2] + (h, wf)
        return (flat @ k_re).reshape(shape), (flat @ k_im).reshape(shape)
    spec = np.fft.rfft2(x, axes=(-2, -1))
    return (np.ascontiguousarray(spec.real, dtype=x.dtype),
            np.ascontiguousarray(spec.imag, dtype=x.dtype))


def _half_adjoint_parts(g_re, g_im, h: int, w: int) -> np.ndarray:
    """Adjoint of the half-spectrum map for (re, im) upstream gradients.

    Either part may be None; shapes are (..., H, W_f) in, (..., H, W) out.
    """
    if _use_matrices(h, w):
        k_re, k_im, _ = _dft_kernel(h, w, (g_re if g_re is not None else g_im).dtype == np.float32)
        wf = w // 2 + 1
        out = None
        for g, k in ((g_re, k_re), (g_im, k_im)):
            if g is None:
                continue
            term = (g.reshape(g.shape[:-2] + (h * wf,)) @ k.T)
            out = term if out is None else out + term
        return out.reshape(out.shape[:-1] + (h, w))
    out = None
    for g, factor in ((g_re, 1.0), (g_im, 1.0j)):
        if g is None:
            continue
        full = np.zeros(g.shape[:-1] + (w,), dtype=np.complex64 if g.dtype == np.float32 else np.complex128)
        full[..., : w // 2 + 1] = factor * g
        term = np.fft.ifft2(full, axes=(-2, -1)).real * (h * w)
        out = term if out is None else out + term
    return out.astype(g_re.dtype if g_re is not None else g_im.dtype)


def _inverse_real_parts(f_re: np.ndarray, f_im: np.ndarray, h: int, w: int) -> np.ndarray:
    """Real inverse of a stored half spectrum, 1/(H*W) normalized."""
    if _use_matrices(h, w):
        _, _, mask = _dft_kernel(h, w, f_re.dtype == np.float32)
        scale = mask / (h * w)
        return _half_adjoint_parts(f_re * scale, f_im * scale, h, w)
    ctype = np.complex64 if f_re.dtype == np.float32 else np.complex128
    return np.fft.irfft2(f_re.astype(ctype) + 1j * f_im.astype(ctype),
                         s=(h, w), axes=(-2, -1)).astype(f_re.dtype)


@dataclass
class ComplexSpectrum:
    """Half-spectrum frequency features as paired real/imaginary tensors.

    ``re`` and ``im`` share the shape (..., H, W_f) with W_f = floor(W/2)+1;
    ``height``/``width`` record the original spatial sizes needed to invert.
    """

    re: Tensor
    im: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ShapeError("spectrum", f"re shape {self.re.shape} != im shape {self.im.shape}")
        wf = self.width // 2 + 1
        if self.re.shape[-2:] != (self.height, wf):
            raise ShapeError(
                "spectrum",
                f"expected trailing dims ({self.height}, {wf}) for W={self.width},"
                f" got {self.re.shape[-2:]}",
            )

    @property
    def shape(self) -> tuple:
        return self.re.shape


def rfft2(x: Tensor) -> ComplexSpectrum:
    """Forward transform of a real tensor over its last two axes."""
    if x.ndim < 2:
        raise ShapeError("rfft2", f"need at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    spec_re, spec_im = _forward_half_parts(x.data, h, w)
    re = make_node(spec_re, (x,), "rfft2_re")
    im = make_node(spec_im, (x,), "rfft2_im")

    def backward_re(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(_half_adjoint_parts(g, None, h, w))

    def backward_im(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(_half_adjoint_parts(None, g, h, w))

    re._backward = backward_re
    im._backward = backward_im
    return ComplexSpectrum(re, im, h, w)


def irfft2(spectrum: ComplexSpectrum) -> Tensor:
    """Real inverse transform with 1/(H*W) normalization.

    The half spectrum is Hermitian-completed before inversion and the real
    part of the result is returned.
    """
    h, w = spectrum.height, spectrum.width
    re, im = spectrum.re, spectrum.im
    out = make_node(_inverse_real_parts(re.data, im.data, h, w), (re, im), "irfft2")

    n = h * w
    mult = _mirror_multiplicity(h, w).astype(re.dtype)

    def backward(g: np.ndarray) -> None:
        if not (re.requires_grad or im.requires_grad):
            return
        ghat_re, ghat_im = _forward_half_parts(g, h, w)
        if re.requires_grad:
            re._accumulate(ghat_re * mult / n)
        if im.requires_grad:
            im._accumulate(ghat_im * mult / n)

    out._backward = backward
    return out


def _mirror_multiplicity(h: int, w: int) -> np.ndarray:
    """How many full-spectrum bins each stored half-spectrum column feeds.

    Interior columns appear twice in the completed spectrum (once directly,
    once conjugated); the u=0 column, and u=W/2 when W is even, only once.
    """
    wf = w // 2 + 1
    mult = np.full((1, wf), 2.0)
    mult[0, 0] = 1.0
    if w % 2 == 0:
        mult[0, w // 2] = 1.0
    return mult


def hermitian_complete(re: np.ndarray, im: np.ndarray, height: int, width: int) -> np.ndarray:
    """Expand a stored half spectrum into the full complex spectrum."""
    wf = width // 2 + 1
    if re.shape[-2:] != (height, wf):
        raise ShapeError("hermitian_complete", f"bad trailing dims {re.shape[-2:]}")
    half = re.astype(np.complex128) + 1j * im.astype(np.complex128)
    full = np.zeros(re.shape[:-1] + (width,), dtype=np.complex128)
    full[..., :wf] = half
    v_mirror = (height - np.arange(height)) % height
    for u in range(wf, width):
        src_u = (width - u) % width
        full[..., :, u] = half[..., v_mirror, src_u].conj()
    return full


def complex_multiply(a: ComplexSpectrum, b: ComplexSpectrum) -> ComplexSpectrum:
    """Elementwise complex product of two equal-shape spectra."""
    if a.shape != b.shape or (a.height, a.width) != (b.height, b.width):
        raise ShapeError("complex_multiply", f"spectra differ: {a.shape} vs {b.shape}")
    ar, ai, br, bi = a.re, a.im, b.re, b.im
    re = make_node(ar.data * br.data - ai.data * bi.data, (ar, ai, br, bi), "cmul_re")
    im = make_node(ar.data * bi.data + ai.data * br.data, (ar, ai, br, bi), "cmul_im")

    def backward_re(g: np.ndarray) -> None:
        if ar.requires_grad:
            ar._accumulate(g * br.data)
        if ai.requires_grad:
            ai._accumulate(-g * bi.data)
        if br.requires_grad:
            br._accumulate(g * ar.data)
        if bi.requires_grad:
            bi._accumulate(-g * ai.data)

    def backward_im(g: np.ndarray) -> None:
        if ar.requires_grad:
            ar._accumulate(g * bi.data)
        if ai.requires_grad:
            ai._accumulate(g * br.data)
        if br.requires_grad:
            br._accumulate(g * ai.data)
        if bi.requires_grad:
            bi._accumulate(g * ar.data)

    re._backward = backward_re
    im._backward = backward_im
    return ComplexSpectrum(re, im, a.height, a.width)


def naive_dft2(x) -> np.ndarray:
    """Direct O(N^2) summation of the forward transform; full spectrum.

    Capped at H*W <= 4096 pixels: this is a verification oracle, not a
    compute path.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("naive_dft2", f"need at least 2 dims, got shape {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    if h * w > NAIVE_DFT_MAX_PIXELS:
        raise ValueError(f"naive_dft2 capped at {NAIVE_DFT_MAX_PIXELS} pixels, got {h * w}")
    ys = np.arange(h).reshape(h, 1)
    xs = np.arange(w).reshape(1, w)
    out = np.zeros(x.shape[:-2] + (h, w), dtype=np.complex128)
    for v in range(h):
        for u in range(w):
            phase = np.exp(-2j * np.pi * (u * xs / w + v * ys / h))
            out[..., v, u] = (x * phase).sum(axis=(-2, -1))
    return out
