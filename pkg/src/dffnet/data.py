"""Scene I/O, PCA spectral reduction, patch extraction, dataset splits,
and a seeded synthetic multi-modal scene generator.

Tensor files use the DTNS layout:

    magic "DTNS" | version u32 LE = 1 | dtype u8 | rank u8
    | dims: rank x u64 LE | payload row-major LE

with dtype codes 0=f32, 1=f64, 2=i32, 3=u8. A scene is a directory holding
hsi.dtns (bands x H x W), aux.dtns (channels x H x W), labels.dtns
(i32 H x W, 0 = unlabeled, 1..K = classes) and a key=value ``meta`` file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DTNS_MAGIC = b"DTNS"
DTNS_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("u1")}
_CODE_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 4): 2, ("u", 1): 3}


class DataError(RuntimeError):
    """Malformed file, inconsistent scene, or bad pipeline input."""


# -- tensor file format ------------------------------------------------------


def write_tensor(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    key = (array.dtype.kind, array.dtype.itemsize)
    if key not in _CODE_FOR_KIND:
        raise DataError(f"unsupported dtype {array.dtype} for {path}")
    code = _CODE_FOR_KIND[key]
    header = DTNS_MAGIC + struct.pack("<IBB", DTNS_VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array).astype(_DTYPE_CODES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DTNS_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 10:
        raise DataError(f"{path}: truncated header")
    version, code, rank = struct.unpack_from("<IBB", raw, 4)
    if version != DTNS_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{path}: unknown dtype code {code}")
    offset = 10
    if len(raw) < offset + 8 * rank:
        raise DataError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", raw, offset)
    offset += 8 * rank
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise DataError(f"{path}: payload is {len(raw) - offset} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims).copy()


# -- scenes ------------------------------------------------------------------


@dataclass
class Scene:
    """Co-registered HSI cube, auxiliary modality, and integer label map."""

    hsi: np.ndarray  # (bands, H, W)
    aux: np.ndarray  # (channels, H, W)
    labels: np.ndarray  # (H, W) int32, 0 = unlabeled

    def __post_init__(self):
        if self.hsi.shape[1:] != self.labels.shape or self.aux.shape[1:] != self.labels.shape:
            raise DataError(
                f"spatial dims disagree: hsi {self.hsi.shape[1:]}, aux {self.aux.shape[1:]},"
                f" labels {self.labels.shape}")
        if self.labels.min() < 0:
            raise DataError("labels must be >= 0")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max())

    @property
    def spatial_shape(self) -> tuple:
        return self.labels.shape


def save_scene(directory, scene: Scene, meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "hsi.dtns", scene.hsi.astype(np.float64))
    write_tensor(directory / "aux.dtns", scene.aux.astype(np.float64))
    write_tensor(directory / "labels.dtns", scene.labels.astype(np.int32))
    lines = dict(meta or {})
    lines.setdefault("bands", scene.hsi.shape[0])
    lines.setdefault("aux_channels", scene.aux.shape[0])
    lines.setdefault("classes", scene.num_classes)
    text = "".join(f"{k}={v}\n" for k, v in sorted(lines.items(), key=lambda kv: str(kv[0])))
    (directory / "meta").write_text(text)


def load_scene(directory) -> Scene:
    directory = Path(directory)
    for name in ("hsi.dtns", "aux.dtns", "labels.dtns"):
        if not (directory / name).exists():
            raise DataError(f"scene {directory} is missing {name}")
    return Scene(
        hsi=read_tensor(directory / "hsi.dtns"),
        aux=read_tensor(directory / "aux.dtns"),
        labels=read_tensor(directory / "labels.dtns").astype(np.int32),
    )


# -- synthetic scenes --------------------------------------------------------

NOISE_SIGMA = 0.05


def synth_generate(num_classes: int = 5, size: int = 64, bands: int = 32,
                   aux_channels: int = 1, seed: int = 42,
                   noise_sigma: float = NOISE_SIGMA) -> Scene:
    """Deterministic multi-modal scene with per-class spectral and texture cues.

    Class regions are a seeded Voronoi partition. Each class carries a
    smooth spectral signature (mixture of Gaussian bumps over the band
    axis) and an auxiliary texture built from a class-specific 2-D
    sinusoid, so the classes are separable both spectrally and in the
    frequency domain. Gaussian noise (sigma 0.05 by default) is added to
    both modalities.
    """
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if bands < 1 or size < 1 or aux_channels < 1:
        raise DataError("size, bands and aux_channels must be positive")
    rng = np.random.default_rng([seed, 0x5CE7E])

    sites = rng.uniform(0, size, size=(num_classes, 2))
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (ys[..., None] - sites[:, 0]) ** 2 + (xs[..., None] - sites[:, 1]) ** 2
    labels = (d2.argmin(axis=-1) + 1).astype(np.int32)

    band_axis = np.linspace(0.0, 1.0, bands)
    signatures = np.zeros((num_classes, bands))
    for k in range(num_classes):
        n_bumps = 2 + int(rng.integers(0, 2))
        centers = rng.uniform(0.05, 0.95, size=n_bumps)
        widths = rng.uniform(0.04, 0.12, size=n_bumps)
        amps = rng.uniform(0.6, 1.4, size=n_bumps)
        for c, w, a in zip(centers, widths, amps):
            signatures[k] += a * np.exp(-0.5 * ((band_axis - c) / w) ** 2)

    hsi = signatures[labels - 1].transpose(2, 0, 1).copy()
    if noise_sigma > 0:
        hsi += rng.normal(0.0, noise_sigma, size=hsi.shape)

    aux = np.zeros((aux_channels, size, size))
    for ch in range(aux_channels):
        freqs = rng.uniform(2.0, float(max(3, size // 4)), size=(num_classes, 2))
        phases = rng.uniform(0.0, 2 * np.pi, size=num_classes)
        orient = rng.uniform(-1.0, 1.0, size=num_classes)
        for k in range(num_classes):
            wave = np.sin(2 * np.pi * (freqs[k, 0] * xs + freqs[k, 1] * ys) / size
                          + phases[k]) + orient[k]
            aux[ch][labels == k + 1] = wave[labels == k + 1]
    if noise_sigma > 0:
        aux += rng.normal(0.0, noise_sigma, size=aux.shape)

    return Scene(hsi=hsi, aux=aux, labels=labels)


# -- PCA ----------------------------------------------------------------------


@dataclass
class PcaModel:
    """Mean, orthonormal components (rows, descending variance), eigenvalues."""

    mean: np.ndarray  # (bands,)
    components: np.ndarray  # (k, bands)
    eigenvalues: np.ndarray  # (k,)


def pca_fit(pixels: np.ndarray, k: int) -> PcaModel:
    """Top-k eigenpairs of the sample covariance (ddof=1) of the pixel rows.

    Component signs are fixed so each row's largest-magnitude entry is
    positive, which makes the decomposition reproducible.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim != 2:
        raise DataError(f"expected (n, bands) pixels, got shape {pixels.shape}")
    n, bands = pixels.shape
    if n < 2:
        raise DataError(f"need at least 2 pixels to fit PCA, got {n}")
    if not (1 <= k <= bands):
        raise DataError(f"k={k} out of range for {bands} bands")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, order].T.copy()
    eigenvalues = np.maximum(eigvals[order], 0.0)
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=components, eigenvalues=eigenvalues)


def pca_transform(model: PcaModel, pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    return (pixels - model.mean) @ model.components.T


def pca_reduce_cube(model: PcaModel, cube: np.ndarray) -> np.ndarray:
    """Apply the fitted projection to a (bands, H, W) cube -> (k, H, W)."""
    bands, h, w = cube.shape
    flat = cube.reshape(bands, h * w).T
    return pca_transform(model, flat).T.reshape(-1, h, w)


# -- patches -------------------------------------------------------------------


def reflect_index(i: int, n: int) -> int:
    """Mirror an out-of-range index back into [0, n) without repeating edges."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return period - i if i >= n else i


def reflect_window(center: int, length: int, n: int) -> np.ndarray:
    """Indices of a window of ``length`` centered at ``center``, reflected."""
    half = length // 2
    return np.array([reflect_index(center + d, n) for d in range(-half, half + 1)])


@dataclass
class Sample:
    hsi_patch: np.ndarray  # (1, k, p, p)
    aux_patch: np.ndarray  # (c_x, p, p)
    label: int
    pixel: tuple  # (row, col)


def extract_patch(reduced_hsi: np.ndarray, aux: np.ndarray, labels: np.ndarray,
                  row: int, col: int, patch: int, require_label: bool = True) -> Sample:
    """Cut reflect-padded patches centered on a pixel from both modalities."""
    if patch % 2 == 0:
        raise DataError(f"patch size must be odd, got {patch}")
    h, w = labels.shape
    label = int(labels[row, col])
    if require_label and label == 0:
        raise DataError(f"pixel ({row}, {col}) is unlabeled")
    rows = reflect_window(row, patch, h)
    cols = reflect_window(col, patch, w)
    hsi_patch = reduced_hsi[:, rows[:, None], cols[None, :]]
    aux_patch = aux[:, rows[:, None], cols[None, :]]
    return Sample(hsi_patch[None], aux_patch, label, (row, col))


# -- splits --------------------------------------------------------------------


@dataclass
class Split:
    train: list  # [(row, col, label), ...]
    test: list


def split_dataset(scene: Scene, train_fraction: float, seed: int) -> Split:
    """Stratified per-class split of labeled pixels, deterministic under seed."""
    if not (0.0 < train_fraction < 1.0):
        raise DataError(f"train fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng([seed, 0x5B117])
    train: list = []
    test: list = []
    for cls in range(1, scene.num_classes + 1):
        rows, cols = np.nonzero(scene.labels == cls)
        if rows.size == 0:
            continue
        order = rng.permutation(rows.size)
        n_train = int(round(train_fraction * rows.size))
        for rank, idx in enumerate(order):
            entry = (int(rows[idx]), int(cols[idx]), cls)
            (train if rank < n_train else test).append(entry)
    return Split(train=train, test=test)


# -- batch assembly -------------------------------------------------------------


@dataclass
class PatchDataset:
    """Materialized patch arrays ready for batching."""

    hsi: np.ndarray  # (n, 1, k, p, p)
    aux: np.ndarray  # (n, c_x, p, p)
    labels: np.ndarray  # (n,) int64, 0-based class indices
    pixels: np.ndarray  # (n, 2)

    def __len__(self) -> int:
        return self.labels.shape[0]


def build_patch_dataset(reduced_hsi: np.ndarray, aux: np.ndarray, labels: np.ndarray,
                        entries, patch: int, dtype=np.float64) -> PatchDataset:
    n = len(entries)
    k = reduced_hsi.shape[0]
    cx = aux.shape[0]
    hsi_out = np.empty((n, 1, k, patch, patch), dtype=dtype)
    aux_out = np.empty((n, cx, patch, patch), dtype=dtype)
    lab_out = np.empty(n, dtype=np.int64)
    pix_out = np.empty((n, 2), dtype=np.int64)
    for i, (row, col, label) in enumerate(entries):
        sample = extract_patch(reduced_hsi, aux, labels, row, col, patch,
                               require_label=label != 0)
        hsi_out[i] = sample.hsi_patch
        aux_out[i] = sample.aux_patch
        lab_out[i] = label - 1
        pix_out[i] = (row, col)
    return PatchDataset(hsi_out, aux_out, lab_out, pix_out)
