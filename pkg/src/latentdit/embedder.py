"""Frozen, seeded patch encoder producing unit-norm condition tokens.

Each 2x2 pixel window (centred pixel values) is projected with a seeded
Gaussian matrix, passed through tanh and mean-pooled over the patch; the
pooled vector is L2-normalised. A real pretrained encoder can replace this
by providing the same ``embed_patch`` / ``embed_grid`` surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

import numpy as np

WINDOW = 2


@dataclass(frozen=True)
class ConditionGrid:
    """Row-major grid of unit-norm tokens, shape (rows, cols, dim)."""

    tokens: np.ndarray

    @property
    def rows(self) -> int:
        return self.tokens.shape[0]

    @property
    def cols(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def flat(self) -> np.ndarray:
        return self.tokens.reshape(-1, self.dim)


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 32
    seed: int = 7
    gain: float = 2.0

    @property
    def extractor_id(self) -> str:
        return f"randproj-w{WINDOW}-d{self.dim}-s{self.seed}"


@lru_cache(maxsize=16)
def _projection(dim: int, seed: int, gain: float) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    fan_in = WINDOW * WINDOW * 3
    w = rng.standard_normal((fan_in, dim)) * (gain / np.sqrt(fan_in))
    b = rng.standard_normal(dim) * 0.1
    w.setflags(write=False)
    b.setflags(write=False)
    return w, b


def _windows(img: np.ndarray) -> np.ndarray:
    h, w, c = img.shape[-3:]
    if h % WINDOW or w % WINDOW:
        raise ValueError(f"patch {h}x{w} must be divisible by {WINDOW}")
    lead = img.shape[:-3]
    n = len(lead)
    y = img.reshape(lead + (h // WINDOW, WINDOW, w // WINDOW, WINDOW, c))
    y = np.moveaxis(y, n + 2, n + 1)
    return y.reshape(lead + ((h // WINDOW) * (w // WINDOW), WINDOW * WINDOW * c))


def embed_patch(img: np.ndarray, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Unit vector of length ``cfg.dim``; batched over any leading axes."""
    w, b = _projection(cfg.dim, cfg.seed, cfg.gain)
    x = _windows(np.asarray(img, dtype=np.float64) - 0.5)
    feats = np.tanh(x @ w + b).mean(axis=-2)
    norm = np.linalg.norm(feats, axis=-1, keepdims=True)
    return (feats / np.maximum(norm, 1e-12)).astype(np.float32)


def tiles(img: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Split (H, W, C) into (rows, cols, H/rows, W/cols, C), tile (i, j) row-major."""
    h, w, c = img.shape
    if h % rows or w % cols:
        raise ValueError(f"image {h}x{w} is not divisible into a {rows}x{cols} grid")
    th, tw = h // rows, w // cols
    return img.reshape(rows, th, cols, tw, c).swapaxes(1, 2)


def embed_grid(img: np.ndarray, rows: int, cols: int,
               cfg: EmbedderConfig = EmbedderConfig()) -> ConditionGrid:
    return ConditionGrid(embed_patch(tiles(np.asarray(img), rows, cols), cfg))


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, 1e-12)
