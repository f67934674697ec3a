"""Cutout, Mixup and CutMix on flattened image batches.

Mixed labels travel as a ``(y1, y2, w)`` triple where ``w`` (per row) is the
weight of ``y1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AUGMENT_KINDS = ("none", "cutout", "mixup", "cutmix")


@dataclass(frozen=True)
class AugmentSpec:
    kind: str = "cutout"
    cutout_size: int | None = None  # None: a quarter of the image side
    mixup_alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise ValueError(f"unknown augmentation {self.kind!r}; expected one of {AUGMENT_KINDS}")
        if not (np.isfinite(self.mixup_alpha) and self.mixup_alpha > 0):
            raise ValueError(f"mixup_alpha must be finite and > 0, got {self.mixup_alpha}")
        if self.cutout_size is not None and self.cutout_size < 0:
            raise ValueError(f"cutout_size must be >= 0, got {self.cutout_size}")

    def resolved_cutout_size(self, image_shape: tuple[int, ...]) -> int:
        side = min(image_shape[:2])
        size = side // 4 if self.cutout_size is None else self.cutout_size
        if size > side:
            raise ValueError(f"cutout size {size} exceeds image side {side}")
        return size


def _square_bounds(center: int, size: int, extent: int) -> tuple[int, int]:
    lo = center - size // 2
    return max(lo, 0), min(lo + size, extent)


def cutout(image: np.ndarray, size: int, rng: np.random.Generator | None = None,
           center: tuple[int, int] | None = None) -> np.ndarray:
    """Zero a ``size`` x ``size`` square centred on a uniformly drawn pixel.

    The square is clipped at the borders.  ``image`` is H x W or H x W x C.
    """
    h, w = image.shape[:2]
    if size > min(h, w):
        raise ValueError(f"cutout size {size} exceeds image {h}x{w}")
    out = image.copy()
    if size == 0:
        return out
    if center is None:
        center = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    y0, y1 = _square_bounds(center[0], size, h)
    x0, x1 = _square_bounds(center[1], size, w)
    out[y0:y1, x0:x1] = 0
    return out


def cutout_batch(x: np.ndarray, image_shape: tuple[int, ...], size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image_shape[:2]
    imgs = x.reshape(len(x), *image_shape).copy()
    if size == 0:
        return x.copy()
    centers = np.stack([rng.integers(0, h, len(x)), rng.integers(0, w, len(x))], axis=1)
    for img, (cy, cx) in zip(imgs, centers):
        y0, y1 = _square_bounds(int(cy), size, h)
        x0, x1 = _square_bounds(int(cx), size, w)
        img[y0:y1, x0:x1] = 0
    return imgs.reshape(x.shape)


def mixup(x1: np.ndarray, y1, x2: np.ndarray, y2, rng: np.random.Generator | None = None,
          alpha: float = 1.0, lam: float | None = None):
    """Convex combination with ``lam ~ Beta(alpha, alpha)``; returns
    ``(x_mix, (y1, y2, w))``."""
    if x1.shape != x2.shape:
        raise ValueError(f"mixup shape mismatch {x1.shape} vs {x2.shape}")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    x_mix = lam * x1 + (1.0 - lam) * x2
    # keep exact endpoints and the convex hull despite rounding
    x_mix = np.clip(x_mix, np.minimum(x1, x2), np.maximum(x1, x2))
    return x_mix, (np.asarray(y1), np.asarray(y2), np.full(np.shape(y1), lam))


def cutmix_box(image_shape: tuple[int, ...], rng: np.random.Generator, lam: float | None = None):
    """Standard CutMix patch: side proportional to sqrt(1 - lam), uniform centre."""
    h, w = image_shape[:2]
    if lam is None:
        lam = float(rng.beta(1.0, 1.0))
    ratio = np.sqrt(1.0 - lam)
    ch, cw = int(h * ratio), int(w * ratio)
    cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    y0, y1 = max(cy - ch // 2, 0), min(cy + ch - ch // 2, h)
    x0, x1 = max(cx - cw // 2, 0), min(cx + cw - cw // 2, w)
    return y0, y1, x0, x1


def cutmix(x1: np.ndarray, y1, x2: np.ndarray, y2, rng: np.random.Generator | None = None,
           image_shape: tuple[int, ...] | None = None, box: tuple[int, int, int, int] | None = None):
    """Paste a rectangle of ``x2`` into ``x1``; the weight of ``y1`` is the
    fraction of ``x1`` left visible.  Works on one image or a batch of
    flattened images sharing one box."""
    if x1.shape != x2.shape:
        raise ValueError(f"cutmix shape mismatch {x1.shape} vs {x2.shape}")
    single = image_shape is None
    shape = x1.shape if single else tuple(image_shape)
    h, w = shape[:2]
    if box is None:
        box = cutmix_box(shape, rng)
    y0, y1_, x0, x1_ = box
    area = max(y1_ - y0, 0) * max(x1_ - x0, 0)
    if single:
        out = x1.copy()
        out[y0:y1_, x0:x1_] = x2[y0:y1_, x0:x1_]
    else:
        out = x1.reshape(len(x1), *shape).copy()
        out[:, y0:y1_, x0:x1_] = x2.reshape(len(x2), *shape)[:, y0:y1_, x0:x1_]
        out = out.reshape(x1.shape)
    weight = 1.0 - area / (h * w)
    return out, (np.asarray(y1), np.asarray(y2), np.full(np.shape(y1), weight))


def dominant_label(labels) -> np.ndarray:
    """Higher-weight label per row (ties go to the first)."""
    if isinstance(labels, tuple):
        y1, y2, w = labels
        return np.where(w >= 0.5, y1, y2)
    return np.asarray(labels)


def augment_batch(spec: AugmentSpec, x: np.ndarray, y: np.ndarray, image_shape: tuple[int, ...] | None,
                  rng: np.random.Generator):
    """Returns ``(x_aug, labels)`` where labels may be a mixed triple."""
    if spec.kind == "none":
        return x, y
    if image_shape is None and spec.kind in ("cutout", "cutmix"):
        raise ValueError(f"{spec.kind} needs image-shaped data")
    if spec.kind == "cutout":
        return cutout_batch(x, image_shape, spec.resolved_cutout_size(image_shape), rng), y
    perm = rng.permutation(len(x))
    if spec.kind == "mixup":
        return mixup(x, y, x[perm], y[perm], rng, spec.mixup_alpha)
    return cutmix(x, y, x[perm], y[perm], rng, image_shape)
