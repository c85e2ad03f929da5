"""Corpus construction: tiling, tissue filtering, manifests, caches and toy corpora."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import storage
from .codec import CodecConfig, encode
from .embedder import EmbedderConfig, embed_grid

logger = logging.getLogger(__name__)

BACKGROUND_LEVEL = 0.85
MIN_FOREGROUND = 0.25

# (light, dark) RGB pairs; index 0 and 1 double as the two stain domains
PALETTES = np.array([
    [[0.96, 0.78, 0.86], [0.42, 0.16, 0.52]],  # pink / purple
    [[0.92, 0.90, 0.86], [0.50, 0.30, 0.10]],  # cream / brown
    [[0.82, 0.87, 0.96], [0.12, 0.24, 0.60]],  # pale blue / navy
    [[0.86, 0.95, 0.80], [0.18, 0.48, 0.22]],  # pale green / green
], dtype=np.float64)


@dataclass(frozen=True)
class Patch:
    x: int
    y: int
    pixels: np.ndarray


def tile_image(image: np.ndarray, size: int, stride: Optional[int] = None) -> List[Patch]:
    """Row-major grid of ``size`` patches; partial edge tiles are dropped."""
    stride = stride or size
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    out = []
    for y in range(0, h - size + 1, stride):
        for x in range(0, w - size + 1, stride):
            out.append(Patch(x=x, y=y, pixels=image[y:y + size, x:x + size]))
    return out


def tissue_filter(patch: np.ndarray, background: float = BACKGROUND_LEVEL,
                  min_fraction: float = MIN_FOREGROUND) -> Tuple[bool, float]:
    """Near-white pixels (every channel above ``background``) are background."""
    fg = np.asarray(patch).min(axis=-1) <= background
    frac = float(fg.mean())
    return frac >= min_fraction, frac


# image files ------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip through 8-bit storage."""
    return (np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255) / 255.0).astype(np.float32)


def save_mask(path, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


# manifests -----------------------------------------------------------------------------

def _unit_hash(*parts) -> float:
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") / 2.0 ** 64


def assign_split(source: str, test_fraction: float, seed: int) -> str:
    return "test" if _unit_hash(seed, source) < test_fraction else "train"


def build_manifest(sources: Sequence, size: int, test_fraction: float, seed: int,
                   stride: Optional[int] = None, filter_tissue: bool = True) -> List[dict]:
    """Tile every source image and assign each source (not patch) to a split.

    ``sources`` holds paths or ``(path, tag)`` pairs.
    """
    if not sources:
        raise ValueError("build_manifest needs at least one source")
    records = []
    for src in sources:
        path, tag = (src, "") if isinstance(src, (str, Path)) else (src[0], src[1])
        path = str(path)
        split = assign_split(path, test_fraction, seed)
        image = load_image(path)
        for p in tile_image(image, size, stride):
            if filter_tissue and not tissue_filter(p.pixels)[0]:
                continue
            pid = hashlib.sha1(f"{path}|{p.x}|{p.y}|{size}".encode()).hexdigest()[:16]
            records.append({"id": pid, "source": path, "x": p.x, "y": p.y, "size": size,
                            "split": split, "source_tag": tag})
    if not records:
        raise ValueError("manifest is empty after tissue filtering")
    return records


def write_manifest(path, records: Iterable[Mapping]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_manifest(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def check_manifest(records: Sequence[Mapping]) -> None:
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate manifest ids")
    keys = [(r["source"], r["x"], r["y"], r["size"]) for r in records]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate (source, x, y, size) entries")
    split_of: Dict[str, str] = {}
    for r in records:
        if split_of.setdefault(r["source"], r["split"]) != r["split"]:
            raise ValueError(f"source {r['source']} appears in more than one split")


# caches ----------------------------------------------------------------------------------

GRID_SIDE = 4


def cache_key(patch: np.ndarray, codec: CodecConfig, embedder: EmbedderConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(patch, dtype="<f4").tobytes())
    h.update(json.dumps({"codec": [codec.factor, codec.seed],
                         "embedder": [embedder.dim, embedder.seed, embedder.gain]}).encode())
    return h.hexdigest()


def precompute_caches(records: Sequence[Mapping], cache_dir, codec: CodecConfig = CodecConfig(),
                      embedder: EmbedderConfig = EmbedderConfig()) -> dict:
    """Encode every manifest entry and embed its full condition grid.

    Returns ``{"written": n, "skipped": n, "errors": [...]}``; a missing source
    is reported per entry and the run continues.
    """
    latents = storage.PackCache(cache_dir, "latents")
    grids = storage.PackCache(cache_dir, "grids")
    written = skipped = 0
    errors = []
    images: Dict[str, np.ndarray] = {}
    for rec in records:
        src = rec["source"]
        try:
            if src not in images:
                images[src] = load_image(src)
        except (FileNotFoundError, OSError) as exc:
            errors.append({"id": rec["id"], "error": f"missing source: {exc}"})
            continue
        img = images[src]
        s = rec["size"]
        patch = img[rec["y"]:rec["y"] + s, rec["x"]:rec["x"] + s]
        key = cache_key(patch, codec, embedder)
        new_l = latents.put(rec["id"], key, encode(patch, codec))
        new_g = grids.put(rec["id"], key, embed_grid(patch, GRID_SIDE, GRID_SIDE, embedder).tokens)
        if new_l or new_g:
            written += 1
        else:
            skipped += 1
    return {"written": written, "skipped": skipped, "errors": errors}


def load_cached(records: Sequence[Mapping], cache_dir, split: Optional[str] = "train"):
    """Stack cached latents and grids for the manifest entries in ``split``."""
    latents = storage.PackCache(cache_dir, "latents")
    grids = storage.PackCache(cache_dir, "grids")
    sel = [r for r in records if split is None or r["split"] == split]
    if not sel:
        raise ValueError(f"no manifest entries in split {split!r}")
    return (np.stack([latents.get(r["id"]) for r in sel]),
            np.stack([grids.get(r["id"]) for r in sel]))


# toy corpora --------------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCorpusSpec:
    generator: str = "textures"
    n: int = 64
    resolution: int = 32
    seed: int = 0
    density: float = 0.3  # masked-cells only
    classes: int = 4  # textures only

    def __post_init__(self):
        if self.generator not in ("textures", "two-domain", "masked-cells"):
            raise ValueError(f"unknown toy generator {self.generator!r}")
        if self.n < 0 or self.resolution < 4:
            raise ValueError("toy corpus needs n >= 0 and resolution >= 4")


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    reps = size // grid.shape[0]
    return np.kron(grid, np.ones((reps, reps)))


def structure_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-scale value noise in [0, 1]."""
    acc = np.zeros((size, size))
    weight = 0.0
    cell = size // 2
    amp = 1.0
    while cell >= 2:
        g = rng.standard_normal((size // cell, size // cell))
        acc += amp * _upsample(g, size)
        weight += amp
        amp *= 0.6
        cell //= 2
    acc += 0.15 * rng.standard_normal((size, size))
    acc /= weight
    return 1.0 / (1.0 + np.exp(-2.5 * acc))


def render(structure: np.ndarray, palette: np.ndarray) -> np.ndarray:
    s = structure[..., None]
    return ((1.0 - s) * palette[0] + s * palette[1]).astype(np.float32)


def _disc_layout(rng: np.random.Generator, size: int, density: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    target = density * size * size
    for _ in range(500):
        r = rng.uniform(1.2, max(1.5, size / 7))
        cy, cx = rng.uniform(0, size, 2)
        disc = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
        gain = np.count_nonzero(disc & ~mask)
        cur = np.count_nonzero(mask)
        if cur + gain > target + gain / 2:
            if cur >= target - gain / 2:
                break
            continue
        mask |= disc
    return mask


def make_toy_corpus(spec: ToyCorpusSpec) -> dict:
    """Generate a reproducible toy corpus.

    textures      -> {"images", "labels", "structure"}
    two-domain    -> {"source", "target", "structure"} rendered in palettes 0 and 1
    masked-cells  -> {"images", "masks"}
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    n, r = spec.n, spec.resolution
    if spec.generator == "textures":
        labels = rng.integers(0, spec.classes, n) if n else np.zeros(0, np.int64)
        structure = np.stack([structure_field(rng, r) for _ in range(n)]) if n else np.zeros((0, r, r))
        pal = PALETTES[np.arange(spec.classes) % len(PALETTES)]
        images = np.stack([render(structure[i], pal[labels[i]]) for i in range(n)]) if n \
            else np.zeros((0, r, r, 3), np.float32)
        return {"images": quantize(images), "labels": labels, "structure": structure}
    if spec.generator == "two-domain":
        structure = np.stack([structure_field(rng, r) for _ in range(n)]) if n else np.zeros((0, r, r))
        src = np.stack([render(s, PALETTES[0]) for s in structure]) if n else np.zeros((0, r, r, 3), np.float32)
        tgt = np.stack([render(s, PALETTES[1]) for s in structure]) if n else np.zeros((0, r, r, 3), np.float32)
        return {"source": quantize(src), "target": quantize(tgt), "structure": structure}
    images, masks = [], []
    bg = np.array([0.95, 0.80, 0.88])
    nucleus = np.array([0.30, 0.12, 0.45])
    for _ in range(n):
        mask = _disc_layout(rng, r, spec.density)
        stipple = rng.random((r, r)) < 0.25 * spec.density
        tex = 0.05 * rng.standard_normal((r, r, 1))
        img = np.where(mask[..., None], nucleus + tex, bg - 0.12 * stipple[..., None] + 0.3 * tex)
        images.append(np.clip(img, 0, 1))
        masks.append(mask.astype(np.uint8))
    if not n:
        return {"images": np.zeros((0, r, r, 3), np.float32), "masks": np.zeros((0, r, r), np.uint8)}
    return {"images": quantize(np.stack(images)), "masks": np.stack(masks)}


def write_toy_corpus(spec: ToyCorpusSpec, out_dir) -> List[Tuple[str, str]]:
    """Write a toy corpus as PNG files; returns ``(path, tag)`` sources."""
    out = Path(out_dir)
    data = make_toy_corpus(spec)
    sources = []
    if spec.generator == "textures":
        for i, img in enumerate(data["images"]):
            p = out / f"tex_{i:05d}.png"
            save_image(p, img)
            sources.append((str(p), f"class{int(data['labels'][i])}"))
    elif spec.generator == "two-domain":
        for i in range(spec.n):
            for dom in ("source", "target"):
                p = out / dom / f"{dom}_{i:05d}.png"
                save_image(p, data[dom][i])
                sources.append((str(p), dom))
    else:
        for i in range(spec.n):
            p = out / f"cells_{i:05d}.png"
            save_image(p, data["images"][i])
            save_mask(out / f"cells_{i:05d}_mask.png", data["masks"][i])
            sources.append((str(p), "cells"))
    return sources
