"""Dataset ingestion, synthetic data generation, and minibatch streaming.

Datasets live on disk as a flat binary layout: ``meta.json`` describing
shapes and splits, ``images.bin`` (raw u8, row-major, [N,H,W,C]),
``labels.bin`` (u16 little-endian) and one newline-delimited index file per
split. The layout is bit-exact and round-trips through save/load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Tuple

import numpy as np

from .errors import LoadError, ValidationError
from .tensor import Tensor

META_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class Dataset:
    images: np.ndarray  # u8 [N, H, W, C]
    labels: np.ndarray  # u16 [N]
    splits: Dict[str, np.ndarray]
    num_classes: int
    name: str

    def __post_init__(self):
        n = self.images.shape[0]
        if self.labels.shape != (n,):
            raise ValidationError(f"labels shape {self.labels.shape} != ({n},)")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValidationError(
                f"label {int(self.labels.max())} >= num_classes {self.num_classes}")
        seen = np.concatenate([idx for idx in self.splits.values()]) if self.splits else np.array([], dtype=np.int64)
        if seen.size != np.unique(seen).size:
            raise ValidationError("splits overlap")
        if seen.size and (seen.min() < 0 or seen.max() >= n):
            raise ValidationError("split index out of range")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.images.shape[1:]


def save(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, h, w, c = dataset.images.shape
    meta = {
        "version": META_VERSION,
        "name": dataset.name,
        "num_images": n,
        "height": h,
        "width": w,
        "channels": c,
        "num_classes": dataset.num_classes,
        "split_sizes": {k: int(v.size) for k, v in dataset.splits.items()},
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2))
    (path / "images.bin").write_bytes(np.ascontiguousarray(dataset.images, dtype=np.uint8).tobytes())
    (path / "labels.bin").write_bytes(dataset.labels.astype("<u2").tobytes())
    for split, idx in dataset.splits.items():
        (path / f"{split}.idx").write_text("\n".join(str(int(i)) for i in idx) + "\n")


def load(path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise LoadError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != META_VERSION:
        raise LoadError(f"unknown meta version {meta.get('version')!r}")
    n, h, w, c = (meta["num_images"], meta["height"], meta["width"], meta["channels"])
    raw = (path / "images.bin").read_bytes()
    expected = n * h * w * c
    if len(raw) != expected:
        raise LoadError(f"images.bin has {len(raw)} bytes, expected {expected}")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w, c).copy()
    raw = (path / "labels.bin").read_bytes()
    if len(raw) != 2 * n:
        raise LoadError(f"labels.bin has {len(raw)} bytes, expected {2 * n}")
    labels = np.frombuffer(raw, dtype="<u2").copy()
    splits = {}
    for split, size in meta["split_sizes"].items():
        text = (path / f"{split}.idx").read_text().split()
        idx = np.array([int(t) for t in text], dtype=np.int64)
        if idx.size != size:
            raise LoadError(f"split {split}: {idx.size} indices, meta says {size}")
        splits[split] = idx
    try:
        return Dataset(images, labels, splits, int(meta["num_classes"]), meta["name"])
    except ValidationError as exc:
        raise LoadError(str(exc)) from exc


def synth_blobs(n: int = 2000, classes: int = 4, image_size: int = 16,
                seed: int = 0, noise: float = 0.1) -> Dataset:
    """Class-conditional oriented-grating images, separable at low noise.

    Each class has a fixed orientation and phase, so the clean patterns are
    linearly separable in pixel space; pixel noise of scale ``noise`` is
    added on top. Splits are a fixed 70/15/15 partition with balanced
    class counts (within +-1).
    """
    if classes < 2:
        raise ValidationError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    freq = 3.0 / image_size
    labels = np.arange(n) % classes  # balanced within +-1
    images = np.empty((n, image_size, image_size, 1), dtype=np.uint8)
    for cls in range(classes):
        theta = np.pi * cls / classes
        pattern = 0.5 + 0.45 * np.sin(
            2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
        mask = labels == cls
        noisy = pattern[None] + noise * rng.standard_normal((int(mask.sum()), image_size, image_size))
        images[mask, :, :, 0] = (np.clip(noisy, 0.0, 1.0) * 255).astype(np.uint8)
    perm = rng.permutation(n)
    n_train = int(0.7 * n)
    n_val = int(0.15 * n)
    splits = {
        "train": perm[:n_train],
        "val": perm[n_train:n_train + n_val],
        "test": perm[n_train + n_val:],
    }
    return Dataset(images, labels.astype(np.uint16), splits, classes,
                   f"synth_blobs(n={n},classes={classes},size={image_size},seed={seed},noise={noise})")


@dataclass
class BatchStream:
    """Single-consumer minibatch iterator over one split.

    Normalization statistics are computed on the train split only. One pass
    visits each index of the split exactly once (the trailing short batch is
    kept, not dropped). The shuffle order depends on (seed, epoch).
    """

    dataset: Dataset
    split: str
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.split not in self.dataset.splits:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.dataset.splits[self.split].size == 0:
            raise ValidationError(f"split {self.split!r} is empty")
        train_idx = self.dataset.splits["train"]
        train_pix = self.dataset.images[train_idx].astype(np.float64) / 255.0
        self.mean = train_pix.mean(axis=(0, 1, 2))
        self.std = train_pix.std(axis=(0, 1, 2)) + 1e-8

    def __len__(self) -> int:
        idx = self.dataset.splits[self.split]
        return -(-idx.size // self.batch_size)

    def batches(self, epoch: int = 0) -> Iterator[Tuple[Tensor, np.ndarray]]:
        idx = self.dataset.splits[self.split]
        if self.shuffle:
            order = np.random.default_rng([self.seed, epoch]).permutation(idx.size)
            idx = idx[order]
        for start in range(0, idx.size, self.batch_size):
            chunk = idx[start:start + self.batch_size]
            imgs = self.dataset.images[chunk].astype(np.float64) / 255.0
            imgs = (imgs - self.mean) / self.std
            x = Tensor(imgs.transpose(0, 3, 1, 2))  # NHWC -> NCHW
            yield x, self.dataset.labels[chunk].astype(np.int64)
