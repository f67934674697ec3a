"""Datasets: IDX binary files and seeded synthetic generators.

All inputs are scaled to [0, 1]; labels are integers in ``[0, classes)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fatlab import digits

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SOURCES = ("idx", "synthetic_blobs", "synthetic_digits")


class DataError(Exception):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.x.ndim != 2 or len(self.x) != len(self.y):
            raise DataError(f"inconsistent dataset: x {self.x.shape}, y {self.y.shape}")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.image_shape)

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x.astype(dtype), self.y, self.num_classes, self.image_shape)


@dataclass(frozen=True)
class DatasetDescriptor:
    """Where the data comes from.

    ``idx``: ``images``/``labels`` paths (optional ``eval_images``/``eval_labels``;
    otherwise the last ``n_eval`` samples are held out).
    ``synthetic_blobs`` / ``synthetic_digits``: ``n`` training plus ``n_eval``
    held-out samples drawn from one seeded stream.
    """

    source: str = "synthetic_blobs"
    images: str = ""
    labels: str = ""
    eval_images: str = ""
    eval_labels: str = ""
    n: int = 1000
    n_eval: int = 1000
    dim: int = 2
    classes: int = 2
    margin: float = 0.3
    spread: float = 0.12
    seed: int = 0
    digit_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown data source {self.source!r}; expected one of {SOURCES}")


# -- IDX -----------------------------------------------------------------

def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise DataError(f"{path}: bad magic 0x{magic:08x} at byte 0 (only unsigned-byte IDX is supported)")
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x} at byte 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header at byte {len(raw)} (need {header} bytes)")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims)) if dims else 0
    if len(raw) < header + count:
        raise DataError(f"{path}: truncated data at byte {len(raw)}, expected {header + count} bytes")
    if len(raw) > header + count:
        raise DataError(f"{path}: {len(raw) - header - count} trailing bytes after byte {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"IDX writer takes uint8 arrays, got {array.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path.write_bytes(header + array.tobytes())
    return path


def load_idx_pair(images: str | Path, labels: str | Path) -> Dataset:
    imgs = read_idx(images, IDX_IMAGES_MAGIC)
    labs = read_idx(labels, IDX_LABELS_MAGIC)
    if len(imgs) != len(labs):
        raise DataError(f"{images} holds {len(imgs)} images but {labels} holds {len(labs)} labels")
    x = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
    y = labs.astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if len(y) else 0, tuple(imgs.shape[1:]))


def save_idx_pair(dataset: Dataset, images: str | Path, labels: str | Path) -> None:
    """Quantises to bytes; the round trip is exact only for multiples of 1/255."""
    shape = dataset.image_shape or (dataset.dim,)
    write_idx(images, np.round(dataset.x * 255.0).astype(np.uint8).reshape(len(dataset), *shape))
    write_idx(labels, dataset.y.astype(np.uint8))


# -- synthetic -----------------------------------------------------------

def blob_centers(dim: int, classes: int, offset: float = 0.3) -> np.ndarray:
    """Centers at ``0.5 +/- offset`` along successive axes (class k uses axis k//2)."""
    if classes > 2 * dim:
        raise DataError(f"synthetic blobs support at most 2*dim={2 * dim} classes, got {classes}")
    centers = np.full((classes, dim), 0.5)
    for k in range(classes):
        centers[k, k // 2] += offset if k % 2 == 0 else -offset
    return centers


def synthetic_blobs(n: int, dim: int = 2, classes: int = 2, margin: float = 0.3, seed: int = 0,
                    spread: float = 0.12) -> Dataset:
    """Gaussian blobs, rejection-sampled so every point is at least
    ``margin/2`` (Euclidean) from each bisecting hyperplane between its own
    center and any other center, then clipped to [0, 1]."""
    centers = blob_centers(dim, classes)
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    min_gap = gaps[~np.eye(classes, dtype=bool)].min() if classes > 1 else np.inf
    if margin >= min_gap:
        raise DataError(f"margin {margin} not achievable: closest centers are {min_gap:.3f} apart")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, classes, n)
    x = np.empty((n, dim))
    todo = np.arange(n)
    while len(todo):
        cand = np.clip(centers[y[todo]] + spread * rng.standard_normal((len(todo), dim)), 0.0, 1.0)
        ok = _blob_margin(cand, y[todo], centers) >= margin / 2
        x[todo[ok]] = cand[ok]
        todo = todo[~ok]
    return Dataset(x, y.astype(np.int64), classes, None)


def _blob_margin(x: np.ndarray, y: np.ndarray, centers: np.ndarray) -> np.ndarray:
    own = centers[y]
    best = np.full(len(x), np.inf)
    for k, c in enumerate(centers):
        # signed distance to the bisector of (own, c), positive on the own side
        num = np.sum((x - c) ** 2, axis=1) - np.sum((x - own) ** 2, axis=1)
        den = 2.0 * np.linalg.norm(own - c, axis=1)
        dist = np.where(y == k, np.inf, num / np.where(den == 0, 1.0, den))
        best = np.minimum(best, dist)
    return best


def load_dataset(descriptor: DatasetDescriptor) -> tuple[Dataset, Dataset]:
    """Returns ``(train, held_out)``."""
    d = descriptor
    if d.source == "idx":
        full = load_idx_pair(d.images, d.labels)
        if d.eval_images:
            return full, load_idx_pair(d.eval_images, d.eval_labels)
        if d.n_eval >= len(full):
            raise DataError(f"n_eval={d.n_eval} leaves no training data out of {len(full)} samples")
        split = len(full) - d.n_eval
        return full.subset(slice(0, split)), full.subset(slice(split, None))
    if d.source == "synthetic_blobs":
        full = synthetic_blobs(d.n + d.n_eval, d.dim, d.classes, d.margin, d.seed, d.spread)
    else:
        full = digits.synthetic_digits(d.n + d.n_eval, d.seed, **d.digit_options)
    return full.subset(slice(0, d.n)), full.subset(slice(d.n, None))
