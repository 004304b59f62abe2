"""CIFAR-10/100 binary ingestion, shift+flip augmentation and batching.

Binary layout (unsigned bytes, no header):

* CIFAR-10: ``data_batch_1.bin`` .. ``data_batch_5.bin`` and
  ``test_batch.bin``, 10000 records of ``<label><3072 pixels>`` each.
* CIFAR-100: ``train.bin`` (50000) and ``test.bin`` (10000) records of
  ``<coarse><fine><3072 pixels>``.

Pixels are three 32x32 planes (R, G, B), each row-major.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CIFAR_STATS",
    "DataFormatError",
    "Image",
    "Dataset",
    "load_cifar",
    "write_cifar",
    "augment_shift_flip",
    "augment_batch",
    "normalize",
    "batches",
    "MAX_SHIFT",
]

MAX_SHIFT = 4
PIXELS = 3 * 32 * 32

# Per-channel mean/std of the training split, pixels scaled to [0, 1].
CIFAR_STATS = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
_COUNTS = {("cifar10", "train"): 10000, ("cifar10", "test"): 10000,
           ("cifar100", "train"): 50000, ("cifar100", "test"): 10000}


class DataFormatError(ValueError):
    pass


@dataclass
class Image:
    pixels: np.ndarray  # float, (3, 32, 32), in [0, 1]
    label: int
    coarse_label: int | None = None


@dataclass
class Dataset:
    """Decoded images (N, 3, H, W) plus integer labels.

    ``images`` is uint8 for data read from disk; float arrays already
    scaled to [0, 1] are accepted as well.
    """

    images: np.ndarray
    labels: np.ndarray
    variant: str = "cifar10"
    split: str = "train"
    coarse_labels: np.ndarray | None = None
    mean: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))
    std: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Image:
        coarse = None if self.coarse_labels is None else int(self.coarse_labels[i])
        return Image(_to_unit(self.images[i : i + 1], np.float64)[0], int(self.labels[i]), coarse)

    @property
    def class_count(self) -> int:
        return 100 if self.variant == "cifar100" else 10

    def subset(self, count: int) -> "Dataset":
        """First ``count`` records (all of them if ``count`` is 0 or None)."""
        if not count or count >= len(self):
            return self
        coarse = None if self.coarse_labels is None else self.coarse_labels[:count]
        return Dataset(self.images[:count], self.labels[:count], self.variant, self.split, coarse, self.mean, self.std)

    @classmethod
    def from_arrays(cls, images, labels, variant="cifar10", split="train") -> "Dataset":
        images = np.asarray(images)
        mean, std = CIFAR_STATS.get(variant, ((0.0,) * 3, (1.0,) * 3))
        return cls(images, np.asarray(labels, np.int64), variant, split, None, mean, std)


def _to_unit(images: np.ndarray, dtype) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(dtype) / dtype(255.0)
    return images.astype(dtype)


def _resolve_dir(path, variant: str) -> Path:
    path = Path(path if path is not None else os.environ.get("MLRN_DATA", "."))
    sub = path / _SUBDIRS[variant]
    return sub if sub.is_dir() else path


def load_cifar(path, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Decode the binary CIFAR files for ``split`` found under ``path``.

    ``path`` may point at the extracted batch directory or its parent.
    """
    if (variant, split) not in _FILES:
        raise ValueError(f"unknown dataset {variant!r}/{split!r}")
    root = _resolve_dir(path, variant)
    head = 1 if variant == "cifar10" else 2
    rec = head + PIXELS
    images, labels, coarse = [], [], []
    for name in _FILES[variant, split]:
        f = root / name
        if not f.is_file():
            raise FileNotFoundError(f"missing CIFAR file {f}")
        raw = np.fromfile(f, dtype=np.uint8)
        expected = _COUNTS[variant, split] * rec
        if raw.size != expected:
            raise DataFormatError(f"{f}: expected {expected} bytes, got {raw.size}")
        raw = raw.reshape(-1, rec)
        labels.append(raw[:, head - 1].astype(np.int64))
        if head == 2:
            coarse.append(raw[:, 0].astype(np.int64))
        images.append(raw[:, head:].reshape(-1, 3, 32, 32))
    ncls = 10 if variant == "cifar10" else 100
    lab = np.concatenate(labels)
    if lab.max(initial=0) >= ncls:
        raise DataFormatError(f"label {lab.max()} out of range for {variant}")
    mean, std = CIFAR_STATS[variant]
    return Dataset(np.concatenate(images), lab, variant, split,
                   np.concatenate(coarse) if coarse else None, mean, std)


def write_cifar(path, images: np.ndarray, labels, variant: str = "cifar10", name: str | None = None,
                coarse_labels=None) -> Path:
    """Write records in the CIFAR binary layout (one file)."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, PIXELS)
    cols = [np.asarray(labels, np.uint8).reshape(-1, 1)]
    if variant == "cifar100":
        coarse = np.zeros(len(images), np.uint8) if coarse_labels is None else np.asarray(coarse_labels, np.uint8)
        cols.insert(0, coarse.reshape(-1, 1))
    out = Path(path) / (name or ("data_batch_1.bin" if variant == "cifar10" else "train.bin"))
    out.parent.mkdir(parents=True, exist_ok=True)
    np.concatenate(cols + [images], axis=1).tofile(out)
    return out


def augment_shift_flip(img, dx: int, dy: int, flip: bool):
    """Translate by (dx, dy) with zero fill, then optionally mirror left-right.

    ``out[c, y, x] = in[c, y + dy, x + dx]`` where in bounds, else 0.
    Accepts an :class:`Image` (returns an Image) or a (C, H, W) array.
    """
    if abs(dx) > MAX_SHIFT or abs(dy) > MAX_SHIFT:
        raise ValueError(f"shift ({dx}, {dy}) exceeds the maximum of {MAX_SHIFT} pixels")
    if isinstance(img, Image):
        return Image(augment_shift_flip(img.pixels, dx, dy, flip), img.label, img.coarse_label)
    x = np.asarray(img)
    _, h, w = x.shape
    out = np.zeros_like(x)
    ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
    xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
    out[:, yd, xd] = x[:, ys, xs]
    return out[:, :, ::-1].copy() if flip else out


def augment_batch(x: np.ndarray, dx, dy, flip) -> np.ndarray:
    """Vectorized :func:`augment_shift_flip` over a (N, C, H, W) batch."""
    n, c, h, w = x.shape
    p = MAX_SHIFT
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    rows = (np.arange(h)[None, :] + p + np.asarray(dy)[:, None])  # (N, H)
    cols = (np.arange(w)[None, :] + p + np.asarray(dx)[:, None])  # (N, W)
    out = xp[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
             rows[:, None, :, None], cols[:, None, None, :]]
    flip = np.asarray(flip, bool)
    out[flip] = out[flip][..., ::-1]
    return out


def normalize(img, mean, std):
    """Per-channel ``(x - mean) / std`` on an Image, (C,H,W) or (N,C,H,W) array."""
    if isinstance(img, Image):
        return Image(normalize(img.pixels, mean, std), img.label, img.coarse_label)
    x = np.asarray(img)
    shape = (-1, 1, 1)
    m = np.asarray(mean, x.dtype).reshape(shape)
    s = np.asarray(std, x.dtype).reshape(shape)
    return (x - m) / s


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | int | None = 0, shuffle: bool = True,
            augment: bool = True, normalized: bool = True, dtype=np.float32):
    """Yield ``(images, labels)`` batches for one epoch.

    A permutation (Fisher-Yates) is drawn from ``rng`` first, then per
    batch the shifts ``dx``, ``dy`` (integers in [-4, 4]) and flips
    (probability 0.5) for its items in order.  The last partial batch is
    kept.  Pass the same Generator across epochs to get a fresh order per
    epoch; an int seeds a new one.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = _to_unit(ds.images[idx], dtype)
        if augment:
            k = len(idx)
            dx = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=k)
            dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=k)
            flip = rng.random(k) < 0.5
            x = augment_batch(x, dx, dy, flip)
        if normalized:
            x = normalize(x, ds.mean, ds.std).astype(dtype, copy=False)
        yield np.ascontiguousarray(x), ds.labels[idx]
