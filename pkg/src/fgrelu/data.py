"""Dataset loading, encoding and transforms.

MNIST is read from IDX files (optionally gzipped), CIFAR-10 from its
binary batches of 3073-byte records.  Both loaders scale pixels by 1/255.
Writers for both formats exist so tests can build fixtures and check
round trips without downloads.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, 784) for MNIST, (N, 3, 32, 32) for CIFAR-10
    labels: np.ndarray  # (N,) ints in 0..9
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() > 9):
            raise FormatError("labels must lie in 0..9")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise FormatError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        """First ``n`` items of a seeded permutation (all items if ``n`` is larger)."""
        if n >= len(self):
            return self
        order = np.random.default_rng(seed).permutation(len(self))[:n]
        order.sort()
        return Dataset(self.images[order], self.labels[order], self.split)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.split)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ParameterError(f"noise sigma must be >= 0, got {self.sigma}")


# ---------------------------------------------------------------------------
# IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expect_magic: int, what: str = "idx") -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{what}: truncated header at byte offset {len(raw)}")
    magic, count = struct.unpack(">ii", raw[:8])
    if magic != expect_magic:
        raise FormatError(f"{what}: bad magic {magic:#010x} at byte offset 0, "
                          f"expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header at byte offset {len(raw)}")
    dims = (count,) + struct.unpack(f">{ndim - 1}i", raw[8:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{what}: truncated data at byte offset {len(raw)}, "
                          f"expected {header + size} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def encode_idx_images(images: np.ndarray) -> bytes:
    """``images`` is uint8 (N, rows, cols)."""
    images = np.asarray(images, dtype=np.uint8)
    n, r, c = images.shape
    return struct.pack(">iiii", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">ii", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images) * 255.0).astype(np.uint8)


def load_mnist_split(path, split: str) -> Dataset:
    img_name, lbl_name = MNIST_FILES[split]
    images = parse_idx(_read_bytes(Path(path) / img_name), IDX_IMAGES_MAGIC, img_name)
    labels = parse_idx(_read_bytes(Path(path) / lbl_name), IDX_LABELS_MAGIC, lbl_name)
    if len(images) != len(labels):
        raise FormatError(f"{split}: {len(images)} images but {len(labels)} labels")
    return Dataset(_to_unit(images.reshape(len(images), -1)), labels.astype(np.int64), split)


def load_mnist(path) -> tuple[Dataset, Dataset]:
    """Train and test splits from a directory of IDX files (``.gz`` accepted)."""
    return load_mnist_split(path, "train"), load_mnist_split(path, "test")


def write_mnist(path, train: Dataset, test: Dataset, compress: bool = False):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for split, ds in (("train", train), ("test", test)):
        img_name, lbl_name = MNIST_FILES[split]
        side = int(round(np.sqrt(ds.images.shape[1])))
        blobs = {img_name: encode_idx_images(_to_bytes(ds.images).reshape(len(ds), side, side)),
                 lbl_name: encode_idx_labels(ds.labels)}
        for name, blob in blobs.items():
            if compress:
                with gzip.GzipFile(path / (name + ".gz"), "wb", mtime=0) as fh:
                    fh.write(blob)
            else:
                (path / name).write_bytes(blob)


# ---------------------------------------------------------------------------
# CIFAR-10

def parse_cifar_batch(raw: bytes, what: str = "cifar") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(f"{what}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}; "
                          f"partial record at byte offset {whole * CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if np.any(labels > 9):
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{what}: label {labels[bad]} out of range at byte offset "
                          f"{bad * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def encode_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    """``images`` is uint8 (N, 3, 32, 32), channel-planar."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    return rec.tobytes()


def _load_cifar_files(path, names, split) -> Dataset:
    imgs, lbls = [], []
    for name in names:
        im, lb = parse_cifar_batch(_read_bytes(Path(path) / name), name)
        imgs.append(im)
        lbls.append(lb)
    return Dataset(_to_unit(np.concatenate(imgs)), np.concatenate(lbls), split)


def load_cifar10(path) -> tuple[Dataset, Dataset]:
    """Train (``data_batch_1..5.bin``) and test (``test_batch.bin``) splits.

    Missing training batches are skipped so that fixtures may ship fewer
    files; at least one must exist.
    """
    path = Path(path)
    train_names = [n for n in CIFAR_TRAIN if (path / n).exists() or (path / (n + ".gz")).exists()]
    if not train_names:
        raise FormatError(f"no CIFAR-10 training batches under {path}")
    return _load_cifar_files(path, train_names, "train"), _load_cifar_files(path, CIFAR_TEST, "test")


def write_cifar10(path, train: Dataset, test: Dataset, batches: int = 1):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    parts = np.array_split(np.arange(len(train)), batches)
    for i, part in enumerate(parts, 1):
        blob = encode_cifar_batch(_to_bytes(train.images[part]), train.labels[part])
        (path / f"data_batch_{i}.bin").write_bytes(blob)
    (path / "test_batch.bin").write_bytes(encode_cifar_batch(_to_bytes(test.images), test.labels))


# ---------------------------------------------------------------------------
# transforms and fixtures

def gaussian_noise(shape, spec: NoiseSpec, rng: np.random.Generator | None = None,
                   dtype=np.float64) -> np.ndarray:
    """I.i.d. N(0, sigma^2) samples; draws from ``rng`` or a stream seeded by ``spec.seed``."""
    if spec.sigma < 0:
        raise ParameterError(f"noise sigma must be >= 0, got {spec.sigma}")
    if spec.sigma == 0:
        return np.zeros(shape, dtype=dtype)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    return (spec.sigma * rng.standard_normal(shape)).astype(dtype, copy=False)


def reduce_contrast(images: np.ndarray, c: float) -> np.ndarray:
    if not 0.0 <= c <= 1.0:
        raise ParameterError(f"contrast factor must lie in [0, 1], got {c}")
    return np.asarray(images) * c


def synthetic_fixture(n: int, dim: int, seed: int = 0, image_shape=None) -> Dataset:
    """Small reproducible dataset of blob-like images in [0, 1].

    Each class owns a fixed random prototype; samples are noisy copies, so
    the data has learnable structure.  ``image_shape`` (e.g. ``(3, 32, 32)``)
    overrides the flat ``dim``-vector layout.
    """
    if n < 1 or dim < 1:
        raise ParameterError("synthetic_fixture needs n >= 1 and dim >= 1")
    shape = tuple(image_shape) if image_shape is not None else (dim,)
    rng = np.random.default_rng(seed)
    protos = rng.random((10,) + shape) ** 3
    labels = rng.integers(0, 10, size=n)
    jitter = 0.15 * rng.standard_normal((n,) + shape)
    images = np.clip(protos[labels] + jitter, 0.0, 1.0)
    images = np.round(images * 255) / 255  # representable in 8-bit formats
    return Dataset(images, labels.astype(np.int64), "train")


def data_dir(env: str, default: str) -> Path:
    return Path(os.environ.get(env, default))
