"""Dataset sources: a procedural shapes set for offline runs and a CIFAR-10 reader.

Every source yields ``(train, eval)`` splits of float images in ``[0, 1]`` with
shape ``[3, H, W]`` and integer labels.
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, Tuple

import numpy as np
import torch

from .errors import ConfigError

SHAPE_CLASSES = (
    "disk", "square", "triangle", "ring", "plus",
    "cross", "hstripes", "vstripes", "frame", "pair",
)


@dataclass
class ImageDataset:
    images: torch.Tensor  # N, 3, H, W
    labels: torch.Tensor  # N

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 3:
            raise ConfigError(f"images must be [N, 3, H, W], got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, n: int) -> "ImageDataset":
        return ImageDataset(self.images[:n], self.labels[:n])

    def batches(self, batch_size: int, generator: torch.Generator = None,
                shuffle: bool = False) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def _shape_mask(kind: str, yy, xx, cy, cx, r, rng) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (r * 0.55) ** 2)
    if kind == "plus":
        w = max(1.0, r * 0.3)
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "cross":
        w = max(1.0, r * 0.3)
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & ((np.abs(dy - dx) <= w) | (np.abs(dy + dx) <= w))
    if kind == "hstripes":
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & (np.floor((dy + r) / 2).astype(int) % 2 == 0)
    if kind == "vstripes":
        box = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        return box & (np.floor((dx + r) / 2).astype(int) % 2 == 0)
    if kind == "frame":
        outer = (np.abs(dy) <= r) & (np.abs(dx) <= r)
        inner = (np.abs(dy) <= r * 0.55) & (np.abs(dx) <= r * 0.55)
        return outer & ~inner
    if kind == "pair":
        s = r * 0.45
        off = r * 0.6 * np.array([np.cos(a := rng.uniform(0, np.pi)), np.sin(a)])
        return (((dy - off[0]) ** 2 + (dx - off[1]) ** 2 <= s ** 2)
                | ((dy + off[0]) ** 2 + (dx + off[1]) ** 2 <= s ** 2))
    raise ValueError(kind)


def synthetic_shapes(n: int, image_size: int = 32, seed: int = 0, noise: float = 0.08) -> ImageDataset:
    """Balanced 10-class dataset of randomly placed, sized and coloured shapes."""
    rng = np.random.default_rng(seed)
    size = image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.arange(n) % len(SHAPE_CLASSES)
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    scale = size / 32.0
    for i, label in enumerate(labels):
        r = rng.uniform(5.0, 10.0) * scale
        cy, cx = rng.uniform(r, size - r, size=2)
        mask = _shape_mask(SHAPE_CLASSES[label], yy, xx, cy, cx, r, rng)
        bg = rng.uniform(0.0, 1.0, size=3)
        fg = rng.uniform(0.0, 1.0, size=3)
        while np.abs(fg - bg).sum() < 0.6:
            fg = rng.uniform(0.0, 1.0, size=3)
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageDataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)))


def _read_cifar_bin(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8).reshape(-1, 1 + 3 * 32 * 32)
    return raw[:, 1:].reshape(-1, 3, 32, 32), raw[:, 0].astype(np.int64)


def _read_cifar_pickle(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        batch = pickle.load(fh, encoding="bytes")
    data = np.asarray(batch[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
    return data, np.asarray(batch[b"labels"], dtype=np.int64)


def cifar10_dir(path) -> Tuple[ImageDataset, ImageDataset]:
    """Read CIFAR-10 from either the binary (``*.bin``) or the python-pickle batch layout."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"CIFAR-10 directory not found: {root}")
    if (root / "data_batch_1.bin").exists():
        reader, suffix = _read_cifar_bin, ".bin"
    elif (root / "data_batch_1").exists():
        reader, suffix = _read_cifar_pickle, ""
    else:
        raise ConfigError(f"no CIFAR-10 batches under {root}")
    train_parts = [reader(p) for i in range(1, 6)
                   if (p := root / f"data_batch_{i}{suffix}").exists()]
    test = reader(root / f"test_batch{suffix}")

    def to_dataset(images, labels):
        return ImageDataset(torch.from_numpy(images.astype(np.float32) / 255.0), torch.from_numpy(labels))

    train = to_dataset(np.concatenate([p[0] for p in train_parts]), np.concatenate([p[1] for p in train_parts]))
    return train, to_dataset(*test)


def _synthetic_source(train_size: int = 5000, eval_size: int = 1000, image_size: int = 32,
                      seed: int = 0, **_) -> Tuple[ImageDataset, ImageDataset]:
    # eval split uses a disjoint stream so it never overlaps train
    return (synthetic_shapes(train_size, image_size, seed),
            synthetic_shapes(eval_size, image_size, seed + 1_000_003))


SOURCES: Dict[str, Callable[..., Tuple[ImageDataset, ImageDataset]]] = {
    "synthetic-shapes": _synthetic_source,
}


def load_dataset(source: str, **options) -> Tuple[ImageDataset, ImageDataset]:
    """Resolve a dataset source spec such as ``synthetic-shapes`` or ``cifar10-dir:/data/cifar``."""
    if source.startswith("cifar10-dir:"):
        return cifar10_dir(source.split(":", 1)[1])
    if source not in SOURCES:
        raise ConfigError(f"unknown dataset source {source!r}; known: {sorted(SOURCES)} or cifar10-dir:<path>")
    return SOURCES[source](**options)


def register_source(name: str, factory: Callable[..., Tuple[ImageDataset, ImageDataset]]) -> None:
    """Plug in another dataset; ``factory(**options)`` must return ``(train, eval)``."""
    SOURCES[name] = factory
