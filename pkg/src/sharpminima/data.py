"""Datasets: IDX (MNIST) files, Gaussian-cluster synthetic data, augmentation and FGSM examples."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import FormatError, SpecError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    image_shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        X = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise SpecError(f"features {X.shape} and labels {y.shape} disagree")
        if not np.all(np.isfinite(X)):
            raise SpecError("features must be finite")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise SpecError("label out of range")
        if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != X.shape[1]:
            raise SpecError("image shape does not match feature width")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.num_classes, self.image_shape)


# IDX container


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream: {exc}", offset=0) from exc
    return raw


def parse_idx(raw: bytes, expected_magic: int, name: str = "<bytes>") -> np.ndarray:
    """Decode an unsigned-byte IDX payload, validating the header against the payload size."""
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{name}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise FormatError(f"{name}: truncated dimension list", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    if any(d == 0 for d in dims):
        raise FormatError(f"{name}: zero-length dimension", offset=4)
    expected = 1
    for d in dims:
        expected *= d
    actual = len(raw) - header_len
    if actual != expected:
        raise FormatError(f"{name}: payload has {actual} bytes, header declares {expected}", offset=header_len)
    return np.frombuffer(raw, dtype=np.uint8, offset=header_len).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IMAGES_MAGIC, str(images_path))
    labels = parse_idx(_read_bytes(labels_path), LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} holds {images.shape[0]} images but {labels_path} holds "
                          f"{labels.shape[0]} labels", offset=4)
    if labels.max() >= num_classes:
        raise FormatError(f"{labels_path}: label {labels.max()} outside [0, {num_classes})", offset=8)
    h, w = images.shape[1], images.shape[2]
    return Dataset(images.reshape(len(images), h * w) / 255.0, labels.astype(np.int64), num_classes, (h, w))


def encode_idx(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise SpecError("IDX export supports unsigned bytes only")
    if (magic & 0xFF) != array.ndim:
        raise SpecError("magic dimension count does not match the array")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(dataset: Dataset, images_path, labels_path, compress: bool = False) -> None:
    """Export to IDX. Features are quantized to bytes via round(255 * value)."""
    if dataset.image_shape is None:
        h, w = 1, dataset.dim
    else:
        h, w = dataset.image_shape
    X = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8).reshape(len(dataset), h, w)
    blobs = [(images_path, encode_idx(X, IMAGES_MAGIC)),
             (labels_path, encode_idx(dataset.labels.astype(np.uint8), LABELS_MAGIC))]
    for path, blob in blobs:
        Path(path).write_bytes(gzip.compress(blob, mtime=0) if compress else blob)


# Synthetic data


def synth_gaussian(m_train: int, m_test: int, d: int, k: int, separation: float, seed: int,
                   image_shape: Optional[Tuple[int, int]] = None):
    """K isotropic unit-variance clusters whose means sit on a sphere of radius ``separation``.

    ``image_shape`` only tags the rows so that image transforms can be applied to them.
    """
    if k < 2:
        raise SpecError("need at least two classes")
    if separation < 0:
        raise SpecError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((k, d))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(m):
        y = rng.integers(0, k, size=m)
        return Dataset(means[y] + rng.standard_normal((m, d)), y, k, image_shape)

    return draw(m_train), draw(m_test)


def synth_teacher(m_train: int, m_test: int, d: int, k: int, hidden: int, seed: int,
                  image_shape: Optional[Tuple[int, int]] = None):
    """Standard-normal inputs labelled by the argmax of a fixed random one-hidden-layer ReLU network.

    Unlike the Gaussian clusters the labelling rule is nonlinear and noise free, so
    fitting the training set better does transfer to the test set.
    """
    if k < 2:
        raise SpecError("need at least two classes")
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((d, hidden)) / np.sqrt(d)
    W2 = rng.standard_normal((hidden, k)) / np.sqrt(hidden)

    def draw(m):
        X = rng.standard_normal((m, d))
        return Dataset(X, np.argmax(np.maximum(X @ W1, 0.0) @ W2, axis=1), k, image_shape)

    return draw(m_train), draw(m_test)


# Augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    horizontal_flip: bool = True
    max_rotation_degrees: float = 10.0
    max_translation_fraction: float = 0.2
    seed: int = 0


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            vals = np.where(ok, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
            out += wr * wc * vals
    return out


def transform_image(img: np.ndarray, flip: bool, degrees: float, shift_rows: float, shift_cols: float) -> np.ndarray:
    """Flip, then rotate about the centre and translate; bilinear sampling with zero fill."""
    if flip:
        img = img[:, ::-1]
    h, w = img.shape
    if degrees == 0.0 and shift_rows == 0.0 and shift_cols == 0.0:
        return np.array(img, dtype=np.float64)
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    rr, ccol = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source location
    yr = rr - shift_rows - cr
    yc = ccol - shift_cols - cc
    src_r = cos * yr - sin * yc + cr
    src_c = sin * yr + cos * yc + cc
    return _bilinear(np.asarray(img, dtype=np.float64), src_r, src_c)


def augment(dataset: Dataset, policy: AugmentPolicy, epoch: int = 0) -> Dataset:
    """Fresh randomly transformed copy of every image; ``epoch`` selects the random stream."""
    if dataset.image_shape is None:
        raise SpecError("augmentation requires image-shaped data")
    h, w = dataset.image_shape
    m = len(dataset)
    rng = np.random.default_rng([policy.seed, epoch])
    flips = rng.random(m) < 0.5
    angles = rng.uniform(-1.0, 1.0, m) * policy.max_rotation_degrees
    shifts_r = rng.uniform(-1.0, 1.0, m) * policy.max_translation_fraction * h
    shifts_c = rng.uniform(-1.0, 1.0, m) * policy.max_translation_fraction * w
    out = np.empty_like(dataset.features)
    for i in range(m):
        img = dataset.features[i].reshape(h, w)
        out[i] = transform_image(img, bool(policy.horizontal_flip and flips[i]), float(angles[i]),
                                 float(shifts_r[i]), float(shifts_c[i])).ravel()
    return Dataset(out, dataset.labels, dataset.num_classes, dataset.image_shape)


def adversarial_examples(spec, params, dataset: Dataset, eta: float = 0.1) -> Dataset:
    """Fast-gradient-sign perturbation of every input.

    Image data (scaled to [0, 1]) is clipped back into that range; other data is left unclipped.
    """
    from .net import input_gradient

    if eta < 0:
        raise SpecError("eta must be non-negative")
    if eta == 0:
        return dataset
    g = input_gradient(spec, params, dataset.features, dataset.labels)
    X = dataset.features + eta * np.sign(g)
    if dataset.image_shape is not None:
        X = np.clip(X, 0.0, 1.0)
    return Dataset(X, dataset.labels, dataset.num_classes, dataset.image_shape)
