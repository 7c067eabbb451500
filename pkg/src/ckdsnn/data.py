"""Dataset ingestion, a deterministic synthetic shape set, augmentation, batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
SHAPE_CLASSES = ("square", "circle", "triangle", "cross")


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DatasetError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"label out of range [0,{self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def _read_bytes(path) -> bytes:
    blob = Path(path).read_bytes()
    if blob[:2] == b"\x1f\x8b":  # transparent gzip
        blob = gzip.decompress(blob)
    return blob


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse big-endian IDX image/label files into a 1-channel dataset."""
    img_blob = _read_bytes(images_path)
    if len(img_blob) < 16:
        raise DatasetError(f"truncated IDX image header in {images_path}")
    magic, n, rows, cols = struct.unpack(">IIII", img_blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetError(f"wrong IDX image magic 0x{magic:08x} in {images_path}")
    if len(img_blob) != 16 + n * rows * cols:
        raise DatasetError(f"truncated IDX image payload in {images_path}")

    lbl_blob = _read_bytes(labels_path)
    if len(lbl_blob) < 8:
        raise DatasetError(f"truncated IDX label header in {labels_path}")
    lmagic, ln = struct.unpack(">II", lbl_blob[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise DatasetError(f"wrong IDX label magic 0x{lmagic:08x} in {labels_path}")
    if len(lbl_blob) != 8 + ln:
        raise DatasetError(f"truncated IDX label payload in {labels_path}")
    if n != ln:
        raise DatasetError(f"IDX count mismatch: {n} images but {ln} labels")

    labels = np.frombuffer(lbl_blob, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"IDX label {labels.max()} out of class range [0,10)")
    pixels = np.frombuffer(img_blob, dtype=np.uint8, offset=16)
    images = (pixels.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0
    return Dataset(images, labels, 10)


def write_mnist_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Quantize back to bytes and emit IDX files (inverse of load_mnist_idx)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DatasetError("IDX writer expects 1-channel images")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar10_bin(data_dir, split: str = "train") -> Dataset:
    """Read CIFAR-10 binary batches (1 label byte + 3072 RGB-plane bytes per record)."""
    root = Path(data_dir)
    if split == "train":
        files = sorted(root.glob("data_batch_*.bin"))
        if not files:
            raise DatasetError(f"no data_batch_*.bin files under {root}")
    elif split == "test":
        files = [root / "test_batch.bin"]
        if not files[0].exists():
            raise DatasetError(f"missing test_batch.bin under {root}")
    else:
        raise DatasetError(f"unknown split {split!r}")

    images, labels = [], []
    for path in files:
        blob = path.read_bytes()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD:
            raise DatasetError(f"{path} size {len(blob)} is not a multiple of {CIFAR_RECORD}")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max() > 9:
            raise DatasetError(f"{path} contains label {batch_labels.max()} out of range [0,10)")
        labels.append(batch_labels)
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), 10)


def write_cifar10_bin(dataset: Dataset, path) -> None:
    n = len(dataset)
    pixels = np.round(dataset.images * 255.0).astype(np.uint8).reshape(n, -1)
    records = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(records.tobytes())


def _shape_mask(kind: str, size: int, cx: int, cy: int, r: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    dx, dy = xs - cx, ys - cy
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        # filled upward-pointing wedge
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        return ((np.abs(dx) <= 1) & (np.abs(dy) <= r)) | ((np.abs(dy) <= 1) & (np.abs(dx) <= r))
    raise DatasetError(f"unknown shape {kind!r}")


def synth_shapes(n: int, classes: int = 4, size: int = 16, seed: int = 0,
                 noise: float = 0.15, channels: int = 3) -> Dataset:
    """Render filled shapes at random positions; class-balanced, seed-determined.

    Each image carries one shape with jittered position/size, per-channel
    random intensity, and additive background noise so the task is learnable
    but not saturated at toy scale.
    """
    if classes < 1 or classes > len(SHAPE_CLASSES):
        raise DatasetError(f"classes must be in [1,{len(SHAPE_CLASSES)}]")
    if n < classes:
        raise DatasetError(f"need at least one sample per class ({classes}), got {n}")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % classes).astype(np.int64)
    images = np.zeros((n, channels, size, size), dtype=np.float32)
    r_lo, r_hi = max(2, size // 6), max(3, size // 4)
    for i in range(n):
        r = int(rng.integers(r_lo, r_hi + 1))
        cx = int(rng.integers(r, size - r))
        cy = int(rng.integers(r, size - r))
        mask = _shape_mask(SHAPE_CLASSES[labels[i]], size, cx, cy, r)
        intensity = rng.uniform(0.5, 1.0, size=channels).astype(np.float32)
        images[i] = mask[None, :, :] * intensity[:, None, None]
        if noise > 0:
            images[i] += rng.normal(scale=noise, size=(channels, size, size)).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, classes)


@dataclass(frozen=True)
class AugmentConfig:
    crop_pad: int = 4
    hflip: bool = True


def augment(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad random crop plus 50% horizontal flip, per sample."""
    if config.crop_pad == 0 and not config.hflip:
        return images
    n, _, h, w = images.shape
    out = images
    if config.crop_pad > 0:
        pad = config.crop_pad
        if h < 2 * pad or w < 2 * pad:
            raise DatasetError(f"spatial dims {(h, w)} too small for crop pad {pad}")
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        out = np.stack([padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs)])
    if config.hflip:
        coins = rng.random(n) < 0.5
        out = out.copy()
        out[coins] = out[coins, :, :, ::-1]
    return np.ascontiguousarray(out)


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over a training split; std floored away from zero."""
    mean = images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = images.std(axis=(0, 2, 3)).astype(np.float32)
    return mean, np.maximum(std, 1e-6)


def normalize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((images - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)


class BatchIterator:
    """Shuffled minibatches; the order is a pure function of (seed, epoch).

    ``seed`` may be an int or a tuple of ints (a derived stream key).
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed=0, shuffle: bool = True):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = (seed,) if isinstance(seed, int) else tuple(seed)
        self.shuffle = shuffle
        self.epoch = 0

    def order(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([*self.seed, epoch]).permutation(n)

    def __iter__(self):
        order = self.order(self.epoch)
        self.epoch += 1
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]
