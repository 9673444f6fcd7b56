"""Dataset ingestion: IDX (MNIST family), CIFAR-10 binary batches,
batching, and the expanded-MNIST placement protocol.

Pixels are scaled to [0, 1] by /255 and nothing else; the sigmoid-output
reconstruction decoders need targets in that range. The dataset root is
resolved from an explicit path or the DATA_DIR environment variable.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 channel-planar pixels

# canonical file names under DATA_DIR
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}


class DataFormatError(ValueError):
    """File contents do not match the expected binary format."""


@dataclass
class Dataset:
    images: np.ndarray        # [n, C, H, W] float32 in [0, 1]
    labels: np.ndarray        # [n] int64
    split: str
    name: str
    n_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.images.shape[0]} images vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels outside [0, {self.n_classes})")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixels outside [0, 1]: range [{lo}, {hi}]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.name,
                       self.n_classes)


def _read_idx(path, expected_magic, expected_ndim):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic bytes {raw[:4].hex()} "
            f"(expected {expected_magic:08x})"
        )
    ndim = magic & 0xFF
    if ndim != expected_ndim:
        raise DataFormatError(f"{path}: {ndim}-dimensional data, expected {expected_ndim}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != count:
        raise DataFormatError(
            f"{path}: payload holds {len(body)} bytes, header promises {count}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, split="train", name="mnist", n_classes=10):
    """Load an IDX image/label file pair (big-endian, uint8 payload)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return Dataset(pixels, labels.astype(np.int64), split, name, n_classes)


def save_idx_images(path, images):
    """Serialize [n, 1, H, W] (or [n, H, W]) images in [0, 1] back to IDX."""
    arr = np.asarray(images)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError("IDX images are single-channel")
        arr = arr[:, 0]
    u8 = np.rint(arr * 255.0).astype(np.uint8)
    n, h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(u8.tobytes())
    return path


def save_idx_labels(path, labels):
    lab = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, lab.shape[0]))
        fh.write(lab.tobytes())
    return path


def load_cifar_binary(paths, split="train", name="cifar10"):
    """Load CIFAR-10 binary batches: 3073-byte records, channel-planar."""
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        if len(raw) % CIFAR_RECORD_BYTES:
            raise DataFormatError(
                f"{path}: {len(raw)} bytes is not a multiple of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    pixels = np.concatenate(images).astype(np.float32) / 255.0
    return Dataset(pixels, np.concatenate(labels), split, name, 10)


def resolve_data_dir(data_dir=None):
    root = data_dir or os.environ.get("DATA_DIR")
    if not root:
        raise FileNotFoundError(
            "no dataset root: pass --data-dir or set the DATA_DIR environment variable"
        )
    return root


def load_dataset(name, split, data_dir=None):
    """Load mnist / fmnist / cifar10 from the dataset root.

    MNIST and Fashion-MNIST use the canonical IDX file names (fmnist in
    a fmnist/ subdirectory); CIFAR-10 uses the binary batches."""
    root = resolve_data_dir(data_dir)
    if name in ("mnist", "fmnist"):
        sub = os.path.join(root, name) if os.path.isdir(os.path.join(root, name)) else root
        img, lab = MNIST_FILES[split]
        return load_idx(os.path.join(sub, img), os.path.join(sub, lab),
                        split=split, name=name)
    if name == "cifar10":
        sub = os.path.join(root, "cifar-10-batches-bin")
        if not os.path.isdir(sub):
            sub = root
        paths = [os.path.join(sub, f) for f in CIFAR_FILES[split]]
        return load_cifar_binary(paths, split=split)
    raise ValueError(f"unknown dataset {name!r} (expected mnist, fmnist, or cifar10)")


def batch_iter(ds, batch_size, shuffle=False, seed=0, epoch=0):
    """Yield (images, labels) batches covering every sample exactly once.

    The shuffle permutation is a pure function of (seed, epoch), so
    interrupted runs can be resumed reproducibly.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    n = len(ds)
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def num_batches(n, batch_size):
    return (n + batch_size - 1) // batch_size


EXPANDED_SIZE = 40
EXPANDED_OFFSETS = EXPANDED_SIZE - 28 + 1  # 13 shifts per axis, 169 placements


def expanded_mnist_sample(image, rng):
    """Place a 28x28 digit at a uniformly random offset on a 40x40 canvas.

    Offsets (dy, dx) are drawn from [0, 12]^2, giving the 169 possible
    placements; all other pixels are zero.
    """
    img = np.asarray(image)
    squeeze = img.ndim == 3
    if squeeze:
        if img.shape[0] != 1:
            raise ValueError("expanded placement needs grayscale input")
        img = img[0]
    if img.shape != (28, 28):
        raise ValueError(f"expected a 28x28 image, got {img.shape}")
    dy, dx = rng.integers(0, EXPANDED_OFFSETS, size=2)
    canvas = np.zeros((EXPANDED_SIZE, EXPANDED_SIZE), dtype=img.dtype)
    canvas[dy:dy + 28, dx:dx + 28] = img
    return canvas[None] if squeeze else canvas


def expand_dataset(ds, seed=0):
    """Apply the random-placement protocol to a whole 28x28 dataset."""
    rng = np.random.default_rng(seed)
    out = np.zeros((len(ds), 1, EXPANDED_SIZE, EXPANDED_SIZE), dtype=ds.images.dtype)
    for i in range(len(ds)):
        out[i] = expanded_mnist_sample(ds.images[i], rng)
    return Dataset(out, ds.labels.copy(), ds.split, f"expanded-{ds.name}", ds.n_classes)
