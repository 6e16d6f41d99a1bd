"""Datasets: a bundled synthetic texture dataset plus a raw-tensor
directory loader for externally supplied data.

The synthetic set renders each class as a fixed low-frequency texture
(mixture of 2-D sinusoids drawn once per class) with additive Gaussian
noise and per-sample gain jitter.  Classes are linearly separable by
design, so training can be validated without any downloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError


@dataclass
class Dataset:
    train_x: np.ndarray  # [n, c, h, w] float32
    train_y: np.ndarray  # [n] int64
    test_x: np.ndarray
    test_y: np.ndarray

    def __post_init__(self):
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise FormatError("train images/labels length mismatch")
        if self.test_x.shape[0] != self.test_y.shape[0]:
            raise FormatError("test images/labels length mismatch")

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_x.shape[1:])


def _class_textures(rng: np.random.Generator, classes: int, channels: int, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    tex = np.zeros((classes, channels, size, size), dtype=np.float64)
    for c in range(classes):
        for ch in range(channels):
            for _ in range(3):
                fx, fy = rng.integers(1, 5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                amp = rng.uniform(0.5, 1.0)
                tex[c, ch] += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        tex[c] /= np.sqrt((tex[c] ** 2).mean()) + 1e-9
    return tex


def make_blobs(train_per_class: int = 64, test_per_class: int = 16, classes: int = 8,
               size: int = 32, channels: int = 3, noise: float = 0.6, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    tex = _class_textures(rng, classes, channels, size)

    def split(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        n = per_class * classes
        y = np.repeat(np.arange(classes), per_class)
        gain = rng.uniform(0.8, 1.2, size=(n, 1, 1, 1))
        x = tex[y] * gain + rng.standard_normal((n, channels, size, size)) * noise
        order = rng.permutation(n)
        return x[order].astype(np.float32), y[order].astype(np.int64)

    train_x, train_y = split(train_per_class)
    test_x, test_y = split(test_per_class)
    return Dataset(train_x, train_y, test_x, test_y)


_FILES = {
    "train_x": ("train_x.f32", "<f4"),
    "train_y": ("train_y.i64", "<i8"),
    "test_x": ("test_x.f32", "<f4"),
    "test_y": ("test_y.i64", "<i8"),
}


def save_dataset_dir(ds: Dataset, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for attr, (fname, dtype) in _FILES.items():
        (root / fname).write_bytes(getattr(ds, attr).astype(dtype).tobytes())
    manifest = {
        "classes": ds.classes,
        "shape": list(ds.sample_shape),
        "train_count": int(ds.train_x.shape[0]),
        "test_count": int(ds.test_x.shape[0]),
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset_dir(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise FormatError(f"{root}: no manifest.json") from None
    except ValueError as e:
        raise FormatError(f"{root}/manifest.json: {e}") from None
    shape = tuple(int(d) for d in manifest["shape"])
    counts = {"train": int(manifest["train_count"]), "test": int(manifest["test_count"])}
    arrays = {}
    for attr, (fname, dtype) in _FILES.items():
        blob = (root / fname).read_bytes()
        arr = np.frombuffer(blob, dtype=dtype)
        n = counts[attr.split("_")[0]]
        want = n * (int(np.prod(shape)) if attr.endswith("_x") else 1)
        if arr.size != want:
            raise FormatError(f"{fname}: expected {want} values, got {arr.size}")
        arrays[attr] = arr.reshape((n,) + shape) if attr.endswith("_x") else arr
    return Dataset(**arrays)
