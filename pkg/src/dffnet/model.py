"""DFFNet assembly: modality stems, a stack of dynamic filter fusion
modules (per-modality dynamic filter blocks plus a shared fusion block),
and a two-layer fully-connected classifier.

The HSI stem is a 3-D convolution (8 kernels of 7x3x3, spectral stride 2,
no spectral padding, spatial "same") whose channel and depth axes are
flattened and mapped to the working width by a 1x1 convolution; the
auxiliary stem is a single 3x3 convolution. After the fusion modules each
stream passes a 3x3 convolution, the streams are concatenated, globally
average-pooled, and classified. ``head_hidden`` was calibrated so the
default configuration lands near 1.28 M learnable scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import dfb as dfb_mod
from . import ssafb as ssafb_mod
from .data import DataError, read_tensor, write_tensor
from .ops import (ConvSpec, concat_channels, conv2d, conv3d, he_uniform, init_conv,
                  linear, pool_spatial, relu)
from .tensor import ShapeError, Tensor

STEM3D_KERNELS = 8
STEM3D_KERNEL = (7, 3, 3)
STEM3D_STRIDE = (2, 1, 1)
STEM3D_PADDING = (0, 1, 1)  # spectral valid, spatial same
CHECKPOINT_FORMAT = "dffnet-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    aux_channels: int = 1
    pca_components: int = 30
    patch_size: int = 11
    width: int = 64
    dffm_count: int = 2
    filter_bases: int = 4
    post_width: int = 64
    head_hidden: int = 7168
    use_dfb: bool = True
    use_ssafb: bool = True
    seed: int = 42

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("config", f"need at least 2 classes, got {self.num_classes}")
        if self.dffm_count < 1:
            raise ShapeError("config", f"dffm_count must be >= 1, got {self.dffm_count}")
        if self.width % 4:
            raise ShapeError("config", f"width must be divisible by 4, got {self.width}")
        if self.patch_size % 2 == 0 or self.patch_size < 1:
            raise ShapeError("config", f"patch size must be odd and positive, got {self.patch_size}")
        if self.pca_components < STEM3D_KERNEL[0]:
            raise ShapeError("config",
                             f"pca_components must be >= {STEM3D_KERNEL[0]} (spectral kernel), got {self.pca_components}")
        if self.filter_bases < 1:
            raise ShapeError("config", f"filter_bases must be >= 1, got {self.filter_bases}")
        if self.aux_channels < 1:
            raise ShapeError("config", f"aux_channels must be >= 1, got {self.aux_channels}")

    @property
    def stem_depth_out(self) -> int:
        return (self.pca_components - STEM3D_KERNEL[0]) // STEM3D_STRIDE[0] + 1


@dataclass
class DffmParams:
    dfb_h: dfb_mod.DfbParams
    dfb_x: dfb_mod.DfbParams
    ssafb: ssafb_mod.SsafbParams

    def named_tensors(self, prefix: str = ""):
        yield from self.dfb_h.named_tensors(prefix + "dfb_h.")
        yield from self.dfb_x.named_tensors(prefix + "dfb_x.")
        yield from self.ssafb.named_tensors(prefix + "ssafb.")


@dataclass
class ModelParams:
    stem3d_w: Tensor
    stem3d_b: Tensor
    stem1x1_w: Tensor
    stem1x1_b: Tensor
    stem2d_w: Tensor
    stem2d_b: Tensor
    dffms: list
    post_h_w: Tensor
    post_h_b: Tensor
    post_x_w: Tensor
    post_x_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    def named_parameters(self) -> dict:
        out = {}
        for name in ("stem3d", "stem1x1", "stem2d", "post_h", "post_x", "fc1", "fc2"):
            out[f"{name}.weight"] = getattr(self, f"{name}_w")
            out[f"{name}.bias"] = getattr(self, f"{name}_b")
        for i, dffm in enumerate(self.dffms):
            out.update(dict(dffm.named_tensors(f"dffm{i}.")))
        return out


def init_model_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng([config.seed, 0x90DE1])
    c = config.width
    p = config.patch_size
    stem3d_w, stem3d_b = init_conv(
        rng, ConvSpec(1, STEM3D_KERNELS, STEM3D_KERNEL, STEM3D_STRIDE, STEM3D_PADDING), dtype)
    flat = STEM3D_KERNELS * config.stem_depth_out
    stem1x1_w, stem1x1_b = init_conv(rng, ConvSpec(flat, c, (1, 1)), dtype)
    stem2d_w, stem2d_b = init_conv(rng, ConvSpec(config.aux_channels, c, (3, 3)), dtype)
    dffms = []
    for _ in range(config.dffm_count):
        dffms.append(DffmParams(
            dfb_mod.init_dfb(rng, config.filter_bases, c, p, p, dtype),
            dfb_mod.init_dfb(rng, config.filter_bases, c, p, p, dtype),
            ssafb_mod.init_ssafb(rng, c, dtype),
        ))
    post_h_w, post_h_b = init_conv(rng, ConvSpec(c, config.post_width, (3, 3)), dtype)
    post_x_w, post_x_b = init_conv(rng, ConvSpec(c, config.post_width, (3, 3)), dtype)
    head_rng_w = dict(zip(("fc1_w", "fc1_b", "fc2_w", "fc2_b"), _init_head(rng, config, dtype)))
    return ModelParams(stem3d_w, stem3d_b, stem1x1_w, stem1x1_b, stem2d_w, stem2d_b,
                       dffms, post_h_w, post_h_b, post_x_w, post_x_b, **head_rng_w)


def _init_head(rng, config: ModelConfig, dtype):
    d_in = 2 * config.post_width
    fc1_w = Tensor(he_uniform(rng, (config.head_hidden, d_in), d_in, dtype), requires_grad=True)
    fc1_b = Tensor(np.zeros(config.head_hidden, dtype=dtype), requires_grad=True)
    fc2_w = Tensor(he_uniform(rng, (config.num_classes, config.head_hidden), config.head_hidden, dtype), requires_grad=True)
    fc2_b = Tensor(np.zeros(config.num_classes, dtype=dtype), requires_grad=True)
    return fc1_w, fc1_b, fc2_w, fc2_b


# -- forward -------------------------------------------------------------------


def stem_forward(hsi: Tensor, aux: Tensor, params: ModelParams, config: ModelConfig):
    """Map raw patches to two C x p x p feature streams."""
    if hsi.ndim == 4:
        hsi = hsi.reshape((1,) + hsi.shape)
    if aux.ndim == 3:
        aux = aux.reshape((1,) + aux.shape)
    b = hsi.shape[0]
    p = config.patch_size
    if hsi.shape[1:] != (1, config.pca_components, p, p):
        raise ShapeError("stem", f"hsi patch shape {hsi.shape[1:]} does not match config")
    if aux.shape[1:] != (config.aux_channels, p, p):
        raise ShapeError("stem", f"aux patch shape {aux.shape[1:]} does not match config")
    h = relu(conv3d(hsi, params.stem3d_w, params.stem3d_b,
                    stride=STEM3D_STRIDE, padding=STEM3D_PADDING))
    h = h.reshape((b, STEM3D_KERNELS * config.stem_depth_out, p, p))
    h = relu(conv2d(h, params.stem1x1_w, params.stem1x1_b, padding="same"))
    a = relu(conv2d(aux, params.stem2d_w, params.stem2d_b, padding="same"))
    return h, a


def dffm_forward(f_h: Tensor, f_x: Tensor, params: DffmParams,
                 use_dfb: bool = True, use_ssafb: bool = True):
    """One fusion stage: per-modality dynamic filtering, then shared fusion.

    With both flags off this is the identity on both streams.
    """
    if f_h.shape != f_x.shape:
        raise ShapeError("dffm", f"stream shapes differ: {f_h.shape} vs {f_x.shape}")
    d_h = dfb_mod.dfb_forward(f_h, params.dfb_h) if use_dfb else f_h
    d_x = dfb_mod.dfb_forward(f_x, params.dfb_x) if use_dfb else f_x
    if not use_ssafb:
        return d_h, d_x
    h_next, x_next, _ = ssafb_mod.ssafb_forward(d_h, d_x, params.ssafb)
    return h_next, x_next


def model_forward(hsi: Tensor, aux: Tensor, config: ModelConfig, params: ModelParams) -> Tensor:
    """Raw class logits, shape (B, num_classes)."""
    f_h, f_x = stem_forward(hsi, aux, params, config)
    for dffm in params.dffms:
        f_h, f_x = dffm_forward(f_h, f_x, dffm, config.use_dfb, config.use_ssafb)
    f_h = relu(conv2d(f_h, params.post_h_w, params.post_h_b, padding="same"))
    f_x = relu(conv2d(f_x, params.post_x_w, params.post_x_b, padding="same"))
    pooled = pool_spatial(concat_channels([f_h, f_x]), "avg")
    hidden = relu(linear(pooled, params.fc1_w, params.fc1_b))
    return linear(hidden, params.fc2_w, params.fc2_b)


def count_parameters(config: ModelConfig) -> int:
    """Exact number of learnable scalars in a freshly initialized model."""
    params = init_model_params(config)
    return sum(t.size for t in params.named_parameters().values())


def estimate_macs(config: ModelConfig) -> int:
    """Rough multiply-accumulate count for one sample's forward pass.

    Counts convolutions and linear layers; transforms and elementwise work
    are excluded.
    """
    c, p = config.width, config.patch_size
    pos = p * p
    total = STEM3D_KERNELS * config.stem_depth_out * pos * int(np.prod(STEM3D_KERNEL))
    flat = STEM3D_KERNELS * config.stem_depth_out
    total += pos * flat * c
    total += pos * config.aux_channels * 9 * c
    per_dfb = (c * (c // 4) + (c // 4) * config.filter_bases  # mixture mlp
               + config.filter_bases * c * p * (p // 2 + 1) * 2  # basis mixing
               + pos * c * 9 + p * (p // 2 + 1) * 2 * c * 9)  # ffn branches
    per_ssafb = (c * (c // 4) + (c // 4) * c + pos * 2 * 25 + pos * 2 * c * c)
    total += config.dffm_count * (2 * per_dfb + per_ssafb)
    total += 2 * pos * c * 9 * config.post_width
    total += 2 * config.post_width * config.head_hidden
    total += config.head_hidden * config.num_classes
    return int(total)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(directory, config: ModelConfig, params: ModelParams,
                    extras: dict | None = None, meta: dict | None = None) -> None:
    """Write manifest + one DTNS file per named tensor into a directory."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    named = params.named_parameters()
    lines = {"format": CHECKPOINT_FORMAT}
    for f in fields(ModelConfig):
        lines[f"config.{f.name}"] = getattr(config, f.name)
    for key, value in (meta or {}).items():
        lines[f"meta.{key}"] = value
    text = "".join(f"{k}={v}\n" for k, v in sorted(lines.items()))
    (directory / "manifest").write_text(text)
    for name, tensor in sorted(named.items()):
        write_tensor(directory / "params" / f"{name}.dtns", tensor.data)
    if extras:
        (directory / "extras").mkdir(exist_ok=True)
        for name, arr in sorted(extras.items()):
            write_tensor(directory / "extras" / f"{name}.dtns", arr)


def _parse_manifest(path: Path) -> dict:
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


_BOOL_NAMES = {"use_dfb", "use_ssafb"}


def config_from_manifest(values: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"config.{f.name}"
        if key not in values:
            raise DataError(f"manifest is missing {key}")
        raw = values[key]
        kwargs[f.name] = raw.lower() == "true" if f.name in _BOOL_NAMES else int(raw)
    return ModelConfig(**kwargs)


def load_checkpoint(directory):
    """Returns (config, params, extras dict, meta dict)."""
    directory = Path(directory)
    manifest = directory / "manifest"
    if not manifest.exists():
        raise DataError(f"{directory} is not a checkpoint (no manifest)")
    values = _parse_manifest(manifest)
    if values.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {values.get('format')!r}")
    config = config_from_manifest(values)
    params = init_model_params(config)
    for name, tensor in params.named_parameters().items():
        path = directory / "params" / f"{name}.dtns"
        if not path.exists():
            raise DataError(f"checkpoint is missing tensor {name}")
        arr = read_tensor(path)
        if arr.shape != tensor.shape:
            raise DataError(f"tensor {name} has shape {arr.shape}, expected {tensor.shape}")
        tensor.data = arr.astype(tensor.dtype)
    extras = {}
    extras_dir = directory / "extras"
    if extras_dir.is_dir():
        for path in sorted(extras_dir.glob("*.dtns")):
            extras[path.stem] = read_tensor(path)
    meta = {k[len("meta."):]: v for k, v in values.items() if k.startswith("meta.")}
    return config, params, extras, meta
