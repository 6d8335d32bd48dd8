"""Toy data generators, grid-file IO, and input augmentation.

All samples live in [-1, 1] per coordinate. The 2-d generators are for
density visualization and the small joint-training benchmarks; raster data
comes in through a packed grid file of unsigned bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError

GRID_MAGIC = b"EBMG"


@dataclass
class Dataset:
    samples: np.ndarray          # [N, D] float64 in [-1, 1]
    labels: np.ndarray | None    # [N] ints, or None when unlabeled
    range: tuple
    name: str
    num_classes: int = 0
    raster_shape: tuple | None = None  # (H, W, C) when samples are images

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def __len__(self) -> int:
        return self.samples.shape[0]


def _counts(n, parts):
    base, extra = divmod(n, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def synth_2d(kind, n, seed, noise=None) -> Dataset:
    """Deterministic 2-d toy datasets, clamped to the unit square."""
    rng = np.random.default_rng(seed)
    if kind == "eight_gaussians":
        sigma = 0.1 if noise is None else noise
        centers = 0.7 * np.stack([
            np.cos(np.arange(8) * np.pi / 4),
            np.sin(np.arange(8) * np.pi / 4),
        ], axis=1)
        blocks, labels = [], []
        for k, count in enumerate(_counts(n, 8)):
            blocks.append(centers[k] + sigma * rng.standard_normal((count, 2)))
            labels.append(np.full(count, k))
        samples, labels = np.vstack(blocks), np.concatenate(labels)
        num_classes = 8
    elif kind == "two_rings":
        sigma = 0.025 if noise is None else noise
        blocks, labels = [], []
        for k, (radius, count) in enumerate(zip((0.4, 0.85), _counts(n, 2))):
            theta = rng.uniform(0.0, 2.0 * np.pi, size=count)
            r = radius + sigma * rng.standard_normal(count)
            blocks.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
            labels.append(np.full(count, k))
        samples, labels = np.vstack(blocks), np.concatenate(labels)
        num_classes = 2
    elif kind == "checkerboard":
        # 4x4 grid of half-unit cells; the label is the cell color.
        cells = rng.integers(0, 16, size=n)
        i, j = cells // 4, cells % 4
        u = rng.uniform(0.0, 0.5, size=(n, 2))
        samples = np.stack([-1.0 + 0.5 * i + u[:, 0],
                            -1.0 + 0.5 * j + u[:, 1]], axis=1)
        labels = ((i + j) % 2).astype(np.int64)
        num_classes = 2
    elif kind == "two_moons":
        sigma = 0.05 if noise is None else noise
        blocks, labels = [], []
        for k, count in enumerate(_counts(n, 2)):
            t = rng.uniform(0.0, np.pi, size=count)
            if k == 0:
                xy = np.stack([np.cos(t), np.sin(t)], axis=1)
            else:
                xy = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
            xy = xy + sigma * rng.standard_normal((count, 2))
            blocks.append(xy)
            labels.append(np.full(count, k))
        raw = np.vstack(blocks)
        # Isotropic rescale of the joint bounding box into the unit square.
        samples = (raw - np.array([0.5, 0.25])) / 1.5
        labels = np.concatenate(labels)
        num_classes = 2
    else:
        raise DataError(f"unknown 2-d dataset kind {kind!r}")
    samples = np.clip(samples, -1.0, 1.0)
    return Dataset(samples=samples, labels=labels.astype(np.int64),
                   range=(-1.0, 1.0), name=kind, num_classes=num_classes)


# -- grid files ---------------------------------------------------------------


def load_grid(path, name=None) -> Dataset:
    """Read a packed byte-image file into float samples in [-1, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != GRID_MAGIC:
        raise DataError(f"{path}: not a grid data file (magic {buf[:4]!r})")
    if len(buf) < 24:
        raise DataError(f"{path}: header truncated")
    count, h, w, c, num_classes = struct.unpack_from("<IIIII", buf, 4)
    if count == 0 or h == 0 or w == 0 or c == 0:
        raise DataError(f"{path}: empty grid dimensions {(count, h, w, c)}")
    offset = 24
    pixel_bytes = count * h * w * c
    if len(buf) < offset + pixel_bytes:
        raise DataError(f"{path}: pixel payload truncated")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=pixel_bytes, offset=offset)
    offset += pixel_bytes
    labels = None
    if num_classes > 0:
        if len(buf) < offset + count * 2:
            raise DataError(f"{path}: label payload truncated")
        labels = np.frombuffer(buf, dtype="<u2", count=count, offset=offset)
        labels = labels.astype(np.int64)
        if labels.max() >= num_classes:
            raise DataError(
                f"{path}: label {labels.max()} out of range for "
                f"{num_classes} classes"
            )
    samples = pixels.astype(np.float64).reshape(count, h * w * c) / 127.5 - 1.0
    return Dataset(samples=samples, labels=labels, range=(-1.0, 1.0),
                   name=name or str(path), num_classes=num_classes,
                   raster_shape=(h, w, c))


def save_grid(dataset: Dataset, path):
    if dataset.raster_shape is None:
        raise DataError("only raster datasets can be written as grid files")
    h, w, c = dataset.raster_shape
    pixels = np.clip(np.round((dataset.samples + 1.0) * 127.5), 0, 255)
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<IIIII", len(dataset), h, w, c, dataset.num_classes))
        f.write(pixels.astype(np.uint8).tobytes())
        if dataset.num_classes > 0:
            f.write(dataset.labels.astype("<u2").tobytes())


# -- augmentation -------------------------------------------------------------


def hflip(img):
    """Mirror one (H, W, C) image left-right."""
    return img[:, ::-1, :].copy()


def translate(img, dx, dy, fill=-1.0):
    """Shift one (H, W, C) image by dy rows and dx columns, padding with fill."""
    h, w, _ = img.shape
    out = np.full_like(img, fill)
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = img[ys_src, xs_src]
    return out


def augment(batch, dataset: Dataset, rng, enabled=True):
    """Input augmentation for classifier batches.

    2-d data gets a small coordinate jitter. Raster data gets a coin-flip
    horizontal mirror, a random shift of up to two pixels with fill at the
    range floor, and dequantization noise of one byte step. Draw order is
    fixed (flips, shifts, noise) for reproducibility.
    """
    if not enabled:
        return batch
    lo, hi = dataset.range
    if dataset.raster_shape is None:
        out = batch + 0.01 * rng.standard_normal(batch.shape)
        return np.clip(out, lo, hi)
    h, w, c = dataset.raster_shape
    imgs = batch.reshape(-1, h, w, c)
    flips = rng.uniform(size=imgs.shape[0]) < 0.5
    shifts = rng.integers(-2, 3, size=(imgs.shape[0], 2))
    out = np.empty_like(imgs)
    for i in range(imgs.shape[0]):
        view = hflip(imgs[i]) if flips[i] else imgs[i]
        out[i] = translate(view, int(shifts[i, 0]), int(shifts[i, 1]), fill=lo)
    out = out + rng.uniform(0.0, 2.0 / 255.0, size=out.shape)
    return np.clip(out, lo, hi).reshape(batch.shape)
