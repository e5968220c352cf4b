"""Procedural 2-D shapes dataset for semantic segmentation.

Classes: 0 background, 1 square, 2 disk, 3 triangle. Images are quantised
to 8 bits at generation so the in-memory dataset equals its on-disk copy.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import pnm

CLASSES = ("background", "square", "disk", "triangle")
NUM_CLASSES = len(CLASSES)
NOISE_SIGMA = 0.02
SIZE_RANGE = (8, 24)


@dataclass
class ShapesSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 class indices


@dataclass
class ShapesDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    seed: int = 0

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> ShapesSample:
        return ShapesSample(self.images[i], self.labels[i])

    def split(self, n_first: int):
        return (ShapesDataset(self.images[:n_first], self.labels[:n_first], self.seed),
                ShapesDataset(self.images[n_first:], self.labels[n_first:], self.seed))


def _shape_mask(kind: int, size: int, cy: float, cx: float, yy, xx):
    half = size / 2
    if kind == 1:
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == 2:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    # upright isosceles triangle with base = height = size
    top = cy - half
    rel = (yy - top) / size
    return (rel >= 0) & (rel <= 1) & (np.abs(xx - cx) <= rel * half)


def render_sample(rng: np.random.Generator, image_size: int) -> ShapesSample:
    h = w = image_size
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    background = rng.uniform(0.15, 0.85, size=3)
    img = np.broadcast_to(background[:, None, None], (3, h, w)).copy()
    labels = np.zeros((h, w), dtype=np.uint8)
    for _ in range(rng.integers(1, 5)):
        kind = int(rng.integers(1, NUM_CLASSES))
        size = int(rng.integers(SIZE_RANGE[0], SIZE_RANGE[1] + 1))
        cy = rng.uniform(size / 2, h - size / 2)
        cx = rng.uniform(size / 2, w - size / 2)
        color = rng.uniform(0, 1, size=3)
        while np.abs(color - background).mean() < 0.25:
            color = rng.uniform(0, 1, size=3)
        mask = _shape_mask(kind, size, cy, cx, yy, xx)
        img[:, mask] = color[:, None]
        labels[mask] = kind
    img *= rng.uniform(0.9, 1.1)
    img += rng.normal(0, NOISE_SIGMA, size=img.shape)
    img = np.round(np.clip(img, 0, 1) * 255).astype(np.float32) / np.float32(255)
    return ShapesSample(img, labels)


def gen_shapes_dataset(count: int, image_size: int = 64, seed: int = 0) -> ShapesDataset:
    if image_size < 32:
        raise ValueError("image_size must be at least 32")
    images = np.zeros((count, 3, image_size, image_size), dtype=np.float32)
    labels = np.zeros((count, image_size, image_size), dtype=np.uint8)
    for i in range(count):
        s = render_sample(np.random.default_rng([seed, i]), image_size)
        images[i], labels[i] = s.image, s.labels
    return ShapesDataset(images, labels, seed)


def save_dataset(ds: ShapesDataset, directory) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(len(ds)):
        pnm.write(d / f"{i:05d}.ppm", pnm.to_uint8(ds.images[i]))
        pnm.write(d / f"{i:05d}.pgm", ds.labels[i])
        written += [d / f"{i:05d}.ppm", d / f"{i:05d}.pgm"]
    size = int(ds.images.shape[-1]) if len(ds) else 0
    meta = d / "meta.json"
    meta.write_text(json.dumps({"seed": ds.seed, "count": len(ds), "size": size}, indent=2) + "\n")
    written.append(meta)
    return written


def load_dataset(directory) -> ShapesDataset:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    n, size = meta["count"], meta["size"]
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    labels = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        images[i] = pnm.from_uint8(pnm.read(d / f"{i:05d}.ppm"))
        labels[i] = pnm.read(d / f"{i:05d}.pgm")
    return ShapesDataset(images, labels, meta["seed"])
