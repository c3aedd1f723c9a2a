"""Toy image datasets and a minimal binary tensor file format.

Tensor files start with ``b"SFT1"``, a little-endian uint32 rank, one uint32
per dimension, then the float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MAGIC = b"SFT1"


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (n, C, H, W)
    y: np.ndarray  # (n,) int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4 or len(self.x) != len(self.y):
            raise DataError(f"need x of shape (n, C, H, W) and n labels, got {self.x.shape} and {self.y.shape}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i : i + batch_size]
            yield self.x[idx], self.y[idx]


def split(ds: Dataset, val_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Disjoint random train/validation split."""
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"validation fraction must be in (0, 1), got {val_fraction}")
    perm = rng.permutation(len(ds))
    n_val = max(1, int(round(len(ds) * val_fraction)))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def separable_patches(n: int, rng: np.random.Generator, size: int = 6, channels: int = 1, noise: float = 0.3) -> Dataset:
    """Horizontal (label 0) versus vertical (label 1) stripes of random phase and sign.

    Every image holds the same multiset of pixel values up to noise, so the
    label is invisible to any per-pixel map followed by pooling; a spatial
    filter is needed.
    """
    y = rng.integers(0, 2, size=n)
    x = np.empty((n, channels, size, size))
    rows = np.arange(size)
    for i in range(n):
        phase = rng.integers(0, 2)
        amp = rng.uniform(0.7, 1.3) * rng.choice([-1.0, 1.0])
        stripe = amp * np.where((rows + phase) % 2 == 0, 1.0, -1.0)
        img = np.tile(stripe[:, None], (1, size)) if y[i] == 0 else np.tile(stripe[None, :], (size, 1))
        x[i] = img[None] + noise * rng.standard_normal((channels, size, size))
    return Dataset(x, y)


def two_moons_images(n: int, rng: np.random.Generator, size: int = 4, noise: float = 0.1) -> Dataset:
    """Two interleaved half circles; each point becomes a 2-channel constant image."""
    y = rng.integers(0, 2, size=n)
    t = rng.uniform(0.0, np.pi, size=n)
    px = np.where(y == 0, np.cos(t), 1.0 - np.cos(t))
    py = np.where(y == 0, np.sin(t), 0.5 - np.sin(t))
    pts = np.stack([px, py], axis=1) + noise * rng.standard_normal((n, 2))
    x = np.broadcast_to(pts[:, :, None, None], (n, 2, size, size)).copy()
    return Dataset(x, y)


GENERATORS = {"separable-patches": separable_patches, "two-moons-images": two_moons_images}


def write_tensor(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated header")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    end = 8 + 4 * ndim
    if len(raw) < end:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != end + 4 * count:
        raise DataError(f"{path}: payload has {len(raw) - end} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=end, count=count).reshape(shape).astype(np.float64)


def load_dataset(cfg: dict, rng: np.random.Generator) -> Dataset:
    kind = cfg.get("kind")
    if kind in GENERATORS:
        opts = {k: v for k, v in cfg.items() if k not in ("kind", "n")}
        return GENERATORS[kind](int(cfg.get("n", 512)), rng, **opts)
    if kind == "tensor-file":
        return Dataset(read_tensor(cfg["x"]), read_tensor(cfg["y"]).astype(np.int64))
    raise DataError(f"unknown dataset kind {kind!r}; expected one of {sorted(GENERATORS) + ['tensor-file']}")
