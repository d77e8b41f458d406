"""Datasets: CIFAR-10 binary batches, the zero-padded CIFAR-10-ZP variant and a
synthetic shapes set for desk-scale experiments.  Pixels are floats in [0, 1]."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialize import read_container, write_container

RECORD = 3073
SHAPE_NAMES = ("disk", "square", "cross", "triangle")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (n, c, h, w) with one label each")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name=None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, name or self.name, dict(self.meta))


# ----------------------------------------------------------------------------- CIFAR-10


def decode_cifar10(data: bytes, name: str = "cifar10") -> LabeledDataset:
    if len(data) % RECORD:
        raise ValueError(f"truncated CIFAR-10 data: {len(data)} bytes is not a multiple of {RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise ValueError(f"label byte {int(labels.max())} exceeds 9")
    images = (raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0))
    return LabeledDataset(images, labels, 10, name)


def load_cifar10(path, split: str = "train") -> LabeledDataset:
    """Load one ``.bin`` batch file, or every batch of ``split`` under a directory."""
    path = Path(path)
    if path.is_dir():
        pattern = "data_batch_*.bin" if split == "train" else "test_batch.bin"
        files = sorted(path.glob(pattern)) or sorted(path.glob(f"*/{pattern}"))
        if not files:
            raise FileNotFoundError(f"no {pattern} under {path}")
        data = b"".join(f.read_bytes() for f in files)
        return decode_cifar10(data, f"cifar10-{split}")
    return decode_cifar10(path.read_bytes(), "cifar10")


def encode_cifar10(dataset: LabeledDataset) -> bytes:
    imgs = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8).reshape(len(dataset), -1)
    if imgs.shape[1] != RECORD - 1:
        raise ValueError("CIFAR-10 records hold 3x32x32 images")
    rows = np.concatenate([dataset.labels.astype(np.uint8)[:, None], imgs], axis=1)
    return rows.tobytes()


def write_cifar10(dataset: LabeledDataset, path) -> None:
    Path(path).write_bytes(encode_cifar10(dataset))


# ----------------------------------------------------------------------------- CIFAR-10-ZP


def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row ``i`` interpolates pixel-centre coordinate ``(i + 0.5) * src / dst - 0.5``."""
    a = np.zeros((dst, src))
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    a[np.arange(dst), lo] += 1 - frac
    a[np.arange(dst), hi] += frac
    return a


def resize_bilinear(images: np.ndarray, size: int) -> np.ndarray:
    h, w = images.shape[-2:]
    ay, ax = bilinear_matrix(h, size), bilinear_matrix(w, size)
    out = np.einsum("ih,nchw,jw->ncij", ay, images.astype(np.float64), ax, optimize=True)
    return out.astype(images.dtype)


def derive_zp(dataset: LabeledDataset) -> LabeledDataset:
    """Down-sample 32x32 images to 30x30 (bilinear) and zero-pad one pixel back to 32x32."""
    if dataset.images.shape[-2:] != (32, 32):
        raise ValueError(f"CIFAR-10-ZP needs 32x32 images, got {dataset.images.shape[-2:]}")
    small = resize_bilinear(dataset.images, 30)
    padded = np.pad(small, ((0, 0), (0, 0), (1, 1), (1, 1)))
    meta = dict(dataset.meta, downsample="bilinear", pad=1)
    return LabeledDataset(padded, dataset.labels.copy(), dataset.class_count, dataset.name + "-zp", meta)


# ----------------------------------------------------------------------------- synthetic shapes


def _shape_mask(kind: int, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == 0:
        return dy**2 + dx**2 <= r**2
    if kind == 1:
        h = 0.85 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if kind == 2:
        t = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= t)) | ((np.abs(dy) <= r) & (np.abs(dx) <= t))
    # upward triangle with apex at (cy - r, cx) and base on y = cy + r
    return (dy <= r) & (np.abs(dx) <= (dy + r) / 2)


def synth_shapes(n: int, size: int = 32, classes: int = 4, seed: int = 0, *, radius=(3.0, 7.0),
                 noise: float = 0.1, background=(0.0, 0.3), contrast=(0.3, 0.7), supersample: int = 4) -> LabeledDataset:
    """Grayscale images with one shape each; shapes stay >= 2 pixels inside the border.

    Radii are clipped to what fits on a ``size`` map.

    Labels are balanced (``n`` split as evenly as possible) and shuffled.
    """
    if size < 12:
        raise ValueError("size must be >= 12")
    if not 2 <= classes <= 4:
        raise ValueError("classes must be in 2..4")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, 1, size, size), dtype=np.float32)
    s = supersample
    grid = (np.arange(size * s) + 0.5) / s - 0.5
    yy, xx = grid[:, None], grid[None, :]
    # the largest radius that still leaves a 2-pixel margin on both sides
    r_hi = min(float(radius[1]), (size - 5) / 2)
    r_lo = min(float(radius[0]), r_hi)
    for i in range(n):
        r = rng.uniform(r_lo, r_hi)
        lo, hi = r + 2, size - 1 - r - 2
        cy, cx = rng.uniform(lo, hi, size=2)
        mask = _shape_mask(int(labels[i]), yy, xx, cy, cx, r).astype(np.float64)
        cover = mask.reshape(size, s, size, s).mean(axis=(1, 3))
        bg = rng.uniform(*background)
        fg = bg + rng.uniform(*contrast)
        img = bg + (fg - bg) * cover + noise * rng.standard_normal((size, size))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    meta = {"size": size, "radius": list(radius), "noise": noise, "seed": seed}
    return LabeledDataset(images, labels, classes, "shapes", meta)


# ----------------------------------------------------------------------------- cache


def save_dataset(dataset: LabeledDataset, path) -> None:
    header = {"kind": "dataset", "name": dataset.name, "class_count": dataset.class_count, "meta": dataset.meta}
    write_container(path, header, [("images", dataset.images), ("labels", dataset.labels)])


def load_dataset(path) -> LabeledDataset:
    header, blocks = read_container(path)
    if header.get("kind") != "dataset":
        raise ValueError("container does not hold a dataset")
    return LabeledDataset(blocks["images"], blocks["labels"].astype(np.int64), header["class_count"],
                          header["name"], header.get("meta", {}))
