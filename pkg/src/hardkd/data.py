"""Datasets and ingestion: the 1-D toy task, IDX digit files, shifted
evaluation sets, and a procedural synthetic-shapes fallback that needs no
downloads."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

TOY_CLUSTER_CENTERS = (-2.2, -0.6, 1.1, 2.5)
TOY_CLUSTER_HALF_WIDTH = 0.15


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass
class ToyDataset:
    train_x: np.ndarray  # (N, 1)
    test_x: np.ndarray   # (100, 1)
    seed: int
    centers: tuple = TOY_CLUSTER_CENTERS
    half_width: float = TOY_CLUSTER_HALF_WIDTH


@dataclass
class DigitDataset:
    images: np.ndarray  # (N, 1, H, W) in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, 9]
    split: str = "train"

    def __len__(self):
        return len(self.images)


@dataclass
class ShiftSpec:
    max_shift: int = 6
    fill: float = 0.0
    seed: int = 0


def make_toy_dataset(seed, n_train=256):
    """Clustered train inputs in [-3, 3] plus 100 uniform test inputs in [-10, 10].

    The clusters are placed so no pair is 2*pi apart: the data alone cannot
    reveal the cos teacher's periodicity.
    """
    if n_train < 10:
        raise ValueError(f"n_train must be >= 10, got {n_train}")
    rng = np.random.default_rng(seed)
    centers = np.asarray(TOY_CLUSTER_CENTERS)
    idx = rng.integers(0, len(centers), size=n_train)
    offsets = rng.uniform(-TOY_CLUSTER_HALF_WIDTH, TOY_CLUSTER_HALF_WIDTH, size=n_train)
    train_x = (centers[idx] + offsets).reshape(-1, 1)
    test_x = rng.uniform(-10.0, 10.0, size=100).reshape(-1, 1)
    return ToyDataset(train_x=train_x, test_x=test_x, seed=seed)


def _read_u32s(f, n, path):
    data = f.read(4 * n)
    if len(data) != 4 * n:
        raise IdxTruncatedError(f"{path}: truncated IDX header")
    return struct.unpack(f">{n}I", data)


def load_idx_images(path):
    """Parse a big-endian IDX image file into float images in [0, 1]."""
    with open(path, "rb") as f:
        (magic,) = _read_u32s(f, 1, path)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, h, w = _read_u32s(f, 3, path)
        payload = f.read(n * h * w)
        if len(payload) != n * h * w:
            raise IdxTruncatedError(
                f"{path}: expected {n * h * w} pixel bytes, got {len(payload)}"
            )
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    return raw.astype(np.float64) / 255.0


def load_idx_labels(path):
    with open(path, "rb") as f:
        (magic,) = _read_u32s(f, 1, path)
        if magic != IDX_LABELS_MAGIC:
            raise IdxMagicError(
                f"{path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n,) = _read_u32s(f, 1, path)
        payload = f.read(n)
        if len(payload) != n:
            raise IdxTruncatedError(f"{path}: expected {n} label bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images_u8):
    """Write raw uint8 images (N, H, W) in IDX format; test/fixture helper."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, h, w = images_u8.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images_u8.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(labels.tobytes())


def load_idx_dataset(images_path, labels_path, split="train"):
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{len(images)} images vs {len(labels)} labels"
        )
    return DigitDataset(images=images, labels=labels, split=split)


def translate_images(images, dx, dy, fill=0.0):
    """Integer-pixel translation of (..., H, W) images with constant fill.

    Positive dx moves content right, positive dy moves content down.
    """
    h, w = images.shape[-2:]
    if abs(dx) >= w or abs(dy) >= h:
        raise ValueError(f"shift ({dx}, {dy}) out of range for {h}x{w} images")
    out = np.full_like(images, fill)
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = images[..., src_y, src_x]
    return out


def shift_dataset(images, spec):
    """Translate each image by an offset drawn uniformly from the shift lattice."""
    h, w = images.shape[-2:]
    if not 0 <= spec.max_shift < w:
        raise ValueError(f"max_shift {spec.max_shift} invalid for width {w}")
    rng = np.random.default_rng(spec.seed)
    out = np.empty_like(images)
    for i in range(len(images)):
        dx, dy = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        out[i] = translate_images(images[i], int(dx), int(dy), fill=spec.fill)
    return out


def _sprite_canvas():
    return np.zeros((28, 28), dtype=np.float64)


def _draw_sprite(cls, thickness, size):
    """Render one 10-class sprite into a 28x28 canvas.

    All strokes stay inside the central 14x14 box so that +-6 pixel shifts
    never clip content.
    """
    img = _sprite_canvas()
    c = 14  # canvas center
    r = size // 2
    lo, hi = c - r, c + r
    t = thickness
    if cls == 0:    # horizontal bar
        img[c - t:c + t, lo:hi] = 1.0
    elif cls == 1:  # vertical bar
        img[lo:hi, c - t:c + t] = 1.0
    elif cls == 2:  # cross
        img[c - t:c + t, lo:hi] = 1.0
        img[lo:hi, c - t:c + t] = 1.0
    elif cls == 3:  # X (both diagonals)
        for i in range(lo, hi):
            img[i, max(lo, i - t + 1):min(hi, i + t)] = 1.0
            j = lo + hi - 1 - i
            img[i, max(lo, j - t + 1):min(hi, j + t)] = 1.0
    elif cls == 4:  # box outline
        img[lo:hi, lo:hi] = 1.0
        img[lo + t:hi - t, lo + t:hi - t] = 0.0
    elif cls == 5:  # filled box
        img[lo:hi, lo:hi] = 1.0
    elif cls == 6:  # ring
        yy, xx = np.mgrid[0:28, 0:28]
        d = np.sqrt((yy - c + 0.5) ** 2 + (xx - c + 0.5) ** 2)
        img[(d < r) & (d >= r - t - 0.5)] = 1.0
    elif cls == 7:  # main diagonal
        for i in range(lo, hi):
            img[i, max(lo, i - t + 1):min(hi, i + t)] = 1.0
    elif cls == 8:  # anti-diagonal
        for i in range(lo, hi):
            j = lo + hi - 1 - i
            img[i, max(lo, j - t + 1):min(hi, j + t)] = 1.0
    elif cls == 9:  # T shape
        img[lo:lo + 2 * t, lo:hi] = 1.0
        img[lo:hi, c - t:c + t] = 1.0
    else:
        raise ValueError(f"unknown sprite class {cls}")
    return img


def synth_shapes(n, seed):
    """Balanced 10-class procedural sprite dataset shaped like digit data."""
    if n < 10:
        raise ValueError(f"n must be >= 10, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    images = np.empty((n, 1, 28, 28), dtype=np.float64)
    for i, cls in enumerate(labels):
        thickness = int(rng.integers(1, 3))
        size = int(rng.integers(10, 15))  # content box <= 14x14
        images[i, 0] = _draw_sprite(int(cls), thickness, size)
    return DigitDataset(images=images, labels=labels.astype(np.int64), split="synth")


def batches(inputs, batch_size, rng, labels=None):
    """One epoch of seeded-shuffle batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(len(inputs))
    for start in range(0, len(inputs), batch_size):
        sel = order[start:start + batch_size]
        if labels is None:
            yield inputs[sel]
        else:
            yield inputs[sel], labels[sel]


def batch_stream(inputs, batch_size, rng, labels=None):
    """Endless stream of epochs from `batches` with a fresh shuffle each epoch."""
    while True:
        yield from batches(inputs, batch_size, rng, labels=labels)
