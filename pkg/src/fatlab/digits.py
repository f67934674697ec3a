"""Procedural 28x28 seven-segment digit images.

A stand-in for handwritten-digit data when none is available offline.  Each
glyph is drawn with random scale, slant, translation, stroke thickness,
endpoint jitter and intensity, optionally with additive noise and stray
"clutter" strokes.  Everything is a pure function of ``(n, seed, options)``.
"""

from __future__ import annotations

import numpy as np

SIDE = 28

# segment endpoints in a 1 x 2 box, y pointing down
SEGMENTS = {
    "a": ((0.0, 0.0), (1.0, 0.0)),
    "b": ((1.0, 0.0), (1.0, 1.0)),
    "c": ((1.0, 1.0), (1.0, 2.0)),
    "d": ((0.0, 2.0), (1.0, 2.0)),
    "e": ((0.0, 1.0), (0.0, 2.0)),
    "f": ((0.0, 0.0), (0.0, 1.0)),
    "g": ((0.0, 1.0), (1.0, 1.0)),
}
SEGMENT_NAMES = tuple(SEGMENTS)
GLYPHS = ("abcdef", "bc", "abdeg", "abcdg", "bcfg", "acdfg", "acdefg", "abc", "abcdefg", "abcdfg")

_ENDS = np.array([SEGMENTS[s] for s in SEGMENT_NAMES])  # 7 x 2 x 2
_MASK = np.array([[s in glyph for s in SEGMENT_NAMES] for glyph in GLYPHS])  # 10 x 7


def _segment_distance(pix: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every pixel centre to segments ``a -> b`` (one per image)."""
    ab = b - a
    rel = pix[None] - a[:, None]
    t = np.clip(np.einsum("npk,nk->np", rel, ab) / np.maximum(np.sum(ab * ab, axis=1), 1e-12)[:, None], 0, 1)
    return np.linalg.norm(rel - t[..., None] * ab[:, None], axis=-1)


def render(labels: np.ndarray, rng: np.random.Generator, intensity=(0.7, 1.0), thickness=(0.6, 1.4),
           scale=(6.0, 9.0), noise: float = 0.0, clutter: int = 0) -> np.ndarray:
    n = len(labels)
    yy, xx = np.mgrid[0:SIDE, 0:SIDE].astype(float)
    pix = np.stack([xx.ravel(), yy.ravel()], axis=1)
    s = rng.uniform(*scale, n)
    slant = rng.uniform(-0.3, 0.3, n)
    centre = SIDE / 2 + rng.uniform(-3, 3, (n, 2))
    thick = rng.uniform(*thickness, n)
    inten = rng.uniform(*intensity, n)

    def place(p):
        # p: n x 2 in glyph units -> pixel coordinates
        y = (p[:, 1] - 1.0) * s
        x = (p[:, 0] - 0.5) * s - slant * y
        return np.stack([centre[:, 0] + x, centre[:, 1] + y], axis=1)

    img = np.zeros((n, SIDE * SIDE))
    strokes = [(k, _MASK[labels, k], 0.0) for k in range(len(SEGMENT_NAMES))]
    if clutter:
        picks = rng.integers(0, len(SEGMENT_NAMES), (clutter, n))
        strokes += [(picks[c], np.ones(n, bool), 1.5) for c in range(clutter)]
    for seg, on, wobble in strokes:
        ends = _ENDS[np.broadcast_to(seg, (n,))]
        a = ends[:, 0].copy()
        b = ends[:, 1].copy()
        if wobble:
            a[:, 0] += rng.uniform(-wobble, wobble, n)
            b[:, 0] += rng.uniform(-wobble, wobble, n)
        pa = place(a) + rng.normal(0.0, 0.5, (n, 2))
        pb = place(b) + rng.normal(0.0, 0.5, (n, 2))
        ink = np.clip(thick[:, None] - _segment_distance(pix, pa, pb) + 0.5, 0.0, 1.0)
        img = np.maximum(img, np.where(on[:, None], ink, 0.0))
    img = img * inten[:, None]
    if noise:
        img = img + rng.uniform(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def synthetic_digits(n: int, seed: int = 0, intensity=(0.7, 1.0), thickness=(0.6, 1.4), noise: float = 0.0,
                     clutter: int = 0, chunk: int = 1000, dtype=np.float64):
    """``n`` labelled glyphs, flattened to 784 values in [0, 1]."""
    from fatlab.data import Dataset

    rng = np.random.default_rng(seed)
    y = rng.integers(0, 10, n)
    parts = [render(y[i:i + chunk], rng, tuple(intensity), tuple(thickness), noise=noise, clutter=int(clutter))
             for i in range(0, n, chunk)]
    x = np.concatenate(parts) if parts else np.zeros((0, SIDE * SIDE))
    return Dataset(x.astype(dtype), y.astype(np.int64), 10, (SIDE, SIDE))
