"""Datasets: IDX and CIFAR binary loaders, a synthetic generator, batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .checkpoint import CheckpointError, read_records, write_records

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataFormatError("image values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, expected_magic: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims))
    if len(buf) - header != need:
        raise DataFormatError(f"{path}: expected {need} data bytes, found {len(buf) - header}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    Path(path).write_bytes(struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> LabeledDataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255 and given one channel."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})")
    x = (images.astype(np.float32) / 255.0)[:, None]
    return LabeledDataset(x, labels.astype(np.int64), num_classes, split)


# -- CIFAR binary ------------------------------------------------------------

def load_cifar_binary(path, label_bytes: int = 1, num_classes: int | None = None,
                      split: str = "train") -> LabeledDataset:
    """Parse CIFAR row records: ``label_bytes`` label bytes then 3072 pixel bytes.

    With two label bytes (CIFAR-100 coarse, fine) the fine label is used.
    ``path`` may be one file or a directory; for a directory the files whose
    names contain ``test`` form the test split and the rest the train split.
    """
    if label_bytes not in (1, 2):
        raise ValueError("label_bytes must be 1 or 2")
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.glob("*.bin") if ("test" in p.name) == (split == "test"))
        if not files:
            raise DataFormatError(f"{path}: no {split} .bin files")
    else:
        files = [path]
    record = label_bytes + CIFAR_PIXELS
    rows = []
    for f in files:
        buf = f.read_bytes()
        if len(buf) == 0 or len(buf) % record:
            raise DataFormatError(f"{f}: size {len(buf)} is not a multiple of record size {record}")
        rows.append(np.frombuffer(buf, dtype=np.uint8).reshape(-1, record))
    data = np.concatenate(rows)
    labels = data[:, label_bytes - 1].astype(np.int64)
    if num_classes is None:
        num_classes = 100 if label_bytes == 2 else 10
    if labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})")
    images = data[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return LabeledDataset(images, labels, num_classes, split)


# -- synthetic generator ---------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    per_class: int = 250
    size: int = 16
    channels: int = 3
    difficulty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.difficulty > 0:
            raise ValueError("difficulty must be positive")
        if self.per_class < 5:
            raise ValueError("need at least 5 samples per class for an 80/20 split")


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of (C, g, g) to (C, size, size)."""
    g = grid.shape[-1]
    pos = np.linspace(0, g - 1, size)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, g - 1)
    w = pos - i0
    rows = grid[:, i0, :] * (1 - w)[None, :, None] + grid[:, i1, :] * w[None, :, None]
    return rows[:, :, i0] * (1 - w)[None, None, :] + rows[:, :, i1] * w[None, None, :]


def class_template(spec: SynthSpec, class_id: int) -> np.ndarray:
    """Smooth pattern in [0.15, 0.85] seeded by (seed, class id)."""
    rng = np.random.default_rng([spec.seed, class_id])
    grid = rng.uniform(0.0, 1.0, size=(spec.channels, 4, 4))
    img = _upsample(grid, spec.size)
    lo, hi = img.min(), img.max()
    return 0.15 + 0.7 * (img - lo) / (hi - lo)


def gen_synth(spec: SynthSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Per-class templates perturbed by difficulty-scaled mixing, shifts and noise.

    Each sample of class y is ``(1 - m) T_y + m T_o`` for a random other class o
    with m ~ U(0, 0.4 d), circularly shifted by up to round(1.5 d) pixels,
    plus Gaussian noise of std 0.15 d, clipped to [0, 1]. As d -> 0 every
    sample collapses onto its template.
    """
    d = spec.difficulty
    templates = np.stack([class_template(spec, c) for c in range(spec.num_classes)])
    max_shift = int(round(1.5 * d))
    n_train = int(round(0.8 * spec.per_class))
    train_x, train_y, test_x, test_y = [], [], [], []
    for c in range(spec.num_classes):
        rng = np.random.default_rng([spec.seed, c, 1])
        n = spec.per_class
        others = rng.integers(0, spec.num_classes - 1, size=n)
        others = others + (others >= c)
        mix = rng.uniform(0.0, min(0.4 * d, 0.49), size=n)
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        noise = rng.normal(0.0, 0.15 * d, size=(n,) + templates.shape[1:])
        imgs = (1 - mix)[:, None, None, None] * templates[c] + mix[:, None, None, None] * templates[others]
        for j in range(n):
            imgs[j] = np.roll(imgs[j], tuple(shifts[j]), axis=(1, 2))
        imgs = np.clip(imgs + noise, 0.0, 1.0).astype(np.float32)
        train_x.append(imgs[:n_train])
        test_x.append(imgs[n_train:])
        train_y.append(np.full(n_train, c, dtype=np.int64))
        test_y.append(np.full(n - n_train, c, dtype=np.int64))
    out = []
    for name, xs, ys, salt in (("train", train_x, train_y, 2), ("test", test_x, test_y, 3)):
        x, y = np.concatenate(xs), np.concatenate(ys)
        perm = np.random.default_rng([spec.seed, salt]).permutation(len(y))
        out.append(LabeledDataset(x[perm], y[perm], spec.num_classes, name))
    return out[0], out[1]


def nearest_template_predict(spec: SynthSpec, images: np.ndarray) -> np.ndarray:
    templates = np.stack([class_template(spec, c) for c in range(spec.num_classes)]).astype(np.float64)
    flat = images.reshape(len(images), -1).astype(np.float64)
    dist = ((flat[:, None, :] - templates.reshape(len(templates), -1)[None]) ** 2).sum(-1)
    return dist.argmin(axis=1)


# -- persistence ---------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> None:
    meta = {"kind": "dataset", "split": ds.split, "num_classes": ds.num_classes}
    write_records(path, meta, {"images": ds.images.astype(np.float32), "labels": ds.labels.astype(np.int64)})


def load_dataset(path) -> LabeledDataset:
    meta, arrays = read_records(path)
    if meta.get("kind") != "dataset":
        raise CheckpointError(f"{path}: not a dataset file")
    return LabeledDataset(arrays["images"], arrays["labels"], meta["num_classes"], meta["split"])


# -- batching ------------------------------------------------------------------

def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded copy plus random horizontal flip."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offs[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def batches(ds: LabeledDataset, batch_size: int, seed: int, epoch: int = 0,
            augment: bool = False, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded per-epoch shuffle; the last partial batch is kept."""
    if not 0 < batch_size <= len(ds):
        raise ValueError(f"batch size {batch_size} not in [1, {len(ds)}]")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ds)) if shuffle else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if augment:
            x = augment_batch(x, rng)
        yield x, ds.labels[idx]
