"""Dataset ingestion: MNIST IDX and CIFAR-10 binary parsers, plus synthetic
format-compatible generators for hermetic runs and toy sets for unit tests.

No downloading happens here; loaders only read files already on disk.
Images are scaled to [0, 1] and per-channel standardized with statistics
computed from the training split.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import IngestError

MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class DatasetHandle:
    id: str
    split: str
    images: np.ndarray   # float64, standardized
    labels: np.ndarray   # int64
    mean: np.ndarray
    std: np.ndarray
    files: dict = field(default_factory=dict)  # path -> sha256


def _read_file(path):
    if not os.path.exists(path) and os.path.exists(str(path) + ".gz"):
        path = str(path) + ".gz"
    try:
        if str(path).endswith(".gz"):
            with gzip.open(path, "rb") as f:
                return f.read(), path
        with open(path, "rb") as f:
            return f.read(), path
    except OSError as e:
        raise IngestError(f"cannot read: {e}", path) from e


def _be32(data, offset, path):
    if len(data) < offset + 4:
        raise IngestError(f"expected 4 bytes, file ends", path, len(data))
    return struct.unpack(">i", data[offset:offset + 4])[0]


def parse_idx_images(path):
    """IDX3 image file -> uint8 array (N, rows, cols)."""
    data, path = _read_file(path)
    magic = _be32(data, 0, path)
    if magic != MNIST_IMAGE_MAGIC:
        raise IngestError(
            f"bad magic 0x{magic & 0xffffffff:08x}, expected "
            f"0x{MNIST_IMAGE_MAGIC:08x}", path, 0)
    n = _be32(data, 4, path)
    rows = _be32(data, 8, path)
    cols = _be32(data, 12, path)
    if min(n, rows, cols) < 0:
        raise IngestError(f"negative dimension in header", path, 4)
    need = 16 + n * rows * cols
    if len(data) < need:
        raise IngestError(
            f"truncated: need {need} bytes, have {len(data)}", path, len(data))
    return np.frombuffer(data[16:need], dtype=np.uint8).reshape(n, rows, cols)


def parse_idx_labels(path):
    """IDX1 label file -> uint8 array (N,); labels must be 0..9."""
    data, path = _read_file(path)
    magic = _be32(data, 0, path)
    if magic != MNIST_LABEL_MAGIC:
        raise IngestError(
            f"bad magic 0x{magic & 0xffffffff:08x}, expected "
            f"0x{MNIST_LABEL_MAGIC:08x}", path, 0)
    n = _be32(data, 4, path)
    need = 8 + n
    if len(data) < need:
        raise IngestError(
            f"truncated: need {need} bytes, have {len(data)}", path, len(data))
    labels = np.frombuffer(data[8:need], dtype=np.uint8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise IngestError(f"label {labels[bad[0]]} > 9", path, 8 + int(bad[0]))
    return labels


def _standardize(raw, mean=None, std=None):
    """raw uint8 (N, C, H, W) -> float64 standardized; returns (x, mean, std)."""
    x = raw.astype(np.float64) / 255.0
    if mean is None:
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        std = np.where(std < 1e-8, 1.0, std)
    x = (x - mean[:, None, None]) / std[:, None, None]
    return np.ascontiguousarray(x), mean, std


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_mnist(data_dir, split="train", stats=None):
    """Load one MNIST split from ``data_dir`` into a DatasetHandle."""
    if split not in MNIST_FILES:
        raise IngestError(f"unknown split {split!r}")
    img_name, lbl_name = MNIST_FILES[split]
    img_path = os.path.join(data_dir, img_name)
    lbl_path = os.path.join(data_dir, lbl_name)
    images = parse_idx_images(img_path)
    labels = parse_idx_labels(lbl_path)
    if images.shape[0] != labels.shape[0]:
        raise IngestError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}",
            img_path)
    if images.shape[1:] != (28, 28):
        raise IngestError(f"expected 28x28 images, got {images.shape[1:]}", img_path)
    raw = images[:, None, :, :]
    x, mean, std = _standardize(raw, *(stats or (None, None)))
    files = {}
    for p in (img_path, lbl_path):
        real = p if os.path.exists(p) else p + ".gz"
        files[os.path.basename(real)] = _sha256(real)
    return DatasetHandle("mnist", split, x, labels.astype(np.int64), mean, std,
                         files)


def _cifar_paths(data_dir, split):
    if split == "train":
        names = sorted(n for n in os.listdir(data_dir)
                       if n.startswith("data_batch_") and n.endswith(".bin"))
    else:
        names = ["test_batch.bin"] if os.path.exists(
            os.path.join(data_dir, "test_batch.bin")) else []
    if not names:
        raise IngestError(f"no CIFAR-10 {split} batch files found", data_dir)
    return [os.path.join(data_dir, n) for n in names]


def parse_cifar_batch(path):
    """One CIFAR-10 binary batch -> (uint8 images (N,3,32,32), uint8 labels)."""
    data, path = _read_file(path)
    if len(data) == 0 or len(data) % CIFAR_RECORD != 0:
        raise IngestError(
            f"size {len(data)} is not a multiple of the {CIFAR_RECORD}-byte "
            f"record", path, len(data) - len(data) % CIFAR_RECORD)
    n = len(data) // CIFAR_RECORD
    rec = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise IngestError(f"label {labels[bad[0]]} > 9", path,
                          int(bad[0]) * CIFAR_RECORD)
    images = rec[:, 1:].reshape(n, 3, 32, 32)
    return images, labels


def load_cifar10(data_dir, split="train", stats=None):
    """Load a CIFAR-10 split (all data_batch_*.bin files, or test_batch.bin)."""
    paths = _cifar_paths(data_dir, split)
    imgs, lbls = zip(*(parse_cifar_batch(p) for p in paths))
    raw = np.concatenate(imgs)
    labels = np.concatenate(lbls)
    x, mean, std = _standardize(raw, *(stats or (None, None)))
    files = {os.path.basename(p): _sha256(p) for p in paths}
    return DatasetHandle("cifar10", split, x, labels.astype(np.int64), mean,
                         std, files)


def load_dataset(data_dir, dataset_id):
    """(train, test) handles; test is standardized with train statistics."""
    if dataset_id == "mnist":
        train = load_mnist(data_dir, "train")
        test = load_mnist(data_dir, "test", stats=(train.mean, train.std))
    elif dataset_id == "cifar10":
        train = load_cifar10(data_dir, "train")
        test = load_cifar10(data_dir, "test", stats=(train.mean, train.std))
    else:
        raise IngestError(f"unknown dataset id {dataset_id!r}")
    return train, test


def subset(handle, n, seed=None):
    """First-n (or seeded random-n) subset of a handle."""
    total = handle.images.shape[0]
    n = min(n, total)
    if seed is None:
        idx = np.arange(n)
    else:
        idx = np.random.default_rng(seed).permutation(total)[:n]
    return DatasetHandle(handle.id, handle.split,
                         np.ascontiguousarray(handle.images[idx]),
                         handle.labels[idx].copy(), handle.mean, handle.std,
                         dict(handle.files))


# ---------------------------------------------------------------------------
# synthetic data (hermetic stand-ins written in the real file formats)
# ---------------------------------------------------------------------------

_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}
_GLYPHS = {d: np.array([[int(c) for c in row] for row in rows], dtype=np.float64)
           for d, rows in _FONT.items()}


def _render_digit(digit, rng, size=28):
    glyph = np.kron(_GLYPHS[digit], np.ones((3, 3)))  # 21 x 15
    if rng.random() < 0.4:  # stroke thickening
        axis = int(rng.integers(0, 2))
        glyph = np.maximum(glyph, np.roll(glyph, 1, axis=axis))
    h, w = glyph.shape
    img = np.zeros((size, size))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    img[top:top + h, left:left + w] = glyph * rng.uniform(0.6, 1.0)
    # box blur softens the hard glyph edges
    pad = np.pad(img, 1)
    img = sum(np.roll(np.roll(pad, dy, 0), dx, 1)
              for dy in (-1, 0, 1) for dx in (-1, 0, 1))[1:-1, 1:-1] / 9.0
    img = img + rng.normal(0.0, 0.04, img.shape)
    return np.clip(img * 255, 0, 255).astype(np.uint8)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", MNIST_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", MNIST_LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def generate_mnist_like(data_dir, train_n=12000, test_n=2000, seed=0):
    """Write a synthetic digit dataset in MNIST IDX format under data_dir."""
    os.makedirs(data_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in (("train", train_n), ("test", test_n)):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        images = np.stack([_render_digit(int(lbl), rng) for lbl in labels])
        img_name, lbl_name = MNIST_FILES[split]
        write_idx_images(os.path.join(data_dir, img_name), images)
        write_idx_labels(os.path.join(data_dir, lbl_name), labels)
    return data_dir


def generate_cifar10_like(data_dir, train_n=2000, test_n=500, seed=0):
    """Write a synthetic colored-blob dataset in CIFAR-10 binary format."""
    os.makedirs(data_dir, exist_ok=True)
    rng = np.random.default_rng(seed)

    def render(label):
        img = rng.normal(64, 12, (3, 32, 32))
        cy, cx = rng.integers(8, 24, size=2)
        yy, xx = np.mgrid[0:32, 0:32]
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        blob = np.exp(-r2 / (2.0 * (3 + label) ** 1.2))
        for c in range(3):
            img[c] += blob * 160 * ((label + c) % 3 + 1) / 3.0
        return np.clip(img, 0, 255).astype(np.uint8)

    for split, n, fname in (("train", train_n, "data_batch_1.bin"),
                            ("test", test_n, "test_batch.bin")):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        with open(os.path.join(data_dir, fname), "wb") as f:
            for lbl in labels:
                f.write(bytes([int(lbl)]))
                f.write(render(int(lbl)).tobytes())
    return data_dir


# ---------------------------------------------------------------------------
# toy sets for unit tests and the reducer demos
# ---------------------------------------------------------------------------

def toy_blobs(n=200, classes=2, dim=2, seed=0, spread=0.5):
    """Linearly separable Gaussian blobs as a flat-feature DatasetHandle."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 2.0, (classes, dim))
    labels = rng.integers(0, classes, size=n)
    x = centers[labels] + rng.normal(0.0, spread, (n, dim))
    return DatasetHandle("toy", "train", np.ascontiguousarray(x),
                         labels.astype(np.int64), np.zeros(dim), np.ones(dim))
