"""Invertible linear image codec standing in for a pretrained VAE.

Encoding is a space-to-depth rearrangement by a factor ``f`` followed by a
fixed orthogonal mixing of the ``3 f^2`` channels, so decode(encode(x)) is
the identity up to float roundoff and L2 norms are preserved.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, List

import numpy as np


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 2
    seed: int = 1234

    @property
    def channels(self) -> int:
        return 3 * self.factor * self.factor


@lru_cache(maxsize=16)
def _mixing_matrix(channels: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
    q = q * np.sign(np.diag(r))[None, :]
    q.setflags(write=False)
    return q


def mixing_matrix(cfg: CodecConfig) -> np.ndarray:
    """Seeded orthogonal matrix (float64); bit-identical for a given seed."""
    return _mixing_matrix(cfg.channels, cfg.seed)


def space_to_depth(x: np.ndarray, f: int) -> np.ndarray:
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    y = x.reshape(lead + (h // f, f, w // f, f, c))
    n = len(lead)
    y = np.moveaxis(y, n + 2, n + 1)
    return y.reshape(lead + (h // f, w // f, f * f * c))


def depth_to_space(x: np.ndarray, f: int) -> np.ndarray:
    h, w, c = x.shape[-3:]
    lead = x.shape[:-3]
    co = c // (f * f)
    n = len(lead)
    y = x.reshape(lead + (h, w, f, f, co))
    y = np.moveaxis(y, n + 2, n + 1)
    return y.reshape(lead + (h * f, w * f, co))


def encode(img: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """(..., H, W, 3) image -> (..., H/f, W/f, 3f^2) latent."""
    img = np.asarray(img)
    f = cfg.factor
    h, w, c = img.shape[-3:]
    if c != 3:
        raise ValueError(f"expected 3 colour channels, got {c}")
    if h % f or w % f:
        raise ValueError(f"image size {h}x{w} must be divisible by the codec factor {f}")
    s2d = space_to_depth(img.astype(np.float64), f)
    return (s2d @ mixing_matrix(cfg).T).astype(np.float32)


def decode(lat: np.ndarray, cfg: CodecConfig = CodecConfig()) -> np.ndarray:
    """Exact inverse of :func:`encode`."""
    lat = np.asarray(lat)
    if lat.shape[-1] != cfg.channels:
        raise ValueError(f"latent has {lat.shape[-1]} channels, codec expects {cfg.channels}")
    mixed = lat.astype(np.float64) @ mixing_matrix(cfg)
    return depth_to_space(mixed, cfg.factor).astype(np.float32)


def reconstruction_psnr_report(corpus: Iterable[np.ndarray], cfg: CodecConfig = CodecConfig()) -> List[dict]:
    """One row per image with the PSNR of its encode/decode round trip."""
    from .metrics import psnr

    rows = []
    for i, img in enumerate(corpus):
        rec = decode(encode(img, cfg), cfg)
        rows.append({"index": i, "psnr": psnr(np.asarray(img, dtype=np.float32), rec, 1.0)})
    if not rows:
        raise ValueError("reconstruction report needs a non-empty corpus")
    return rows
