"""Distribution and image metrics: Frechet distance, KID, SSIM, PSNR, Dice/IoU, k-NN.

The feature extractor for the distributional metrics is the condition embedder
with its own seed (``EVAL_EXTRACTOR``), so metrics never share weights with the
conditioning path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import storage
from .embedder import EmbedderConfig, cosine, embed_patch

EVAL_EXTRACTOR = EmbedderConfig(dim=32, seed=1001)
PSNR_SENTINEL = 100.0


class NotPSDError(ValueError):
    pass


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("feature statistics need at least 2 samples")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-6, rtol=0):
            raise ValueError("covariance is not symmetric")

    @classmethod
    def from_features(cls, feats: np.ndarray) -> "FeatureStats":
        """Mean and unbiased covariance; rows are sorted first so order never matters."""
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"features must be (N, D), got {x.shape}")
        if len(x) < 2:
            raise ValueError("feature statistics need at least 2 samples")
        x = x[np.lexsort(x.T[::-1])]
        mu = x.mean(axis=0)
        d = x - mu
        sigma = d.T @ d / (len(x) - 1)
        return cls(mu=mu, sigma=0.5 * (sigma + sigma.T), n=len(x))


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    if w.min() < -1e-6:
        raise NotPSDError(f"{what} has eigenvalue {w.min():.3g} below -1e-6")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, eps_reg: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2).

    Tr (Sa Sb)^1/2 is computed as the sum of square roots of the eigenvalues of the
    symmetric matrix Sa^1/2 Sb Sa^1/2, which shares its spectrum with Sa Sb.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(f"feature dims differ: {a.mu.shape[0]} vs {b.mu.shape[0]}")
    if eps_reg < 0:
        raise ValueError("eps_reg must be non-negative")
    eye = np.eye(a.mu.shape[0])
    sa = a.sigma + eps_reg * eye
    sb = b.sigma + eps_reg * eye
    ra = _psd_sqrt(sa, "first covariance")
    _psd_sqrt(sb, "second covariance")
    mid = ra @ sb @ ra
    w = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if w.min() < -1e-6:
        raise NotPSDError(f"Sa^1/2 Sb Sa^1/2 has eigenvalue {w.min():.3g} below -1e-6")
    tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
    diff = a.mu - b.mu
    return max(float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt), 0.0)


def features(images: np.ndarray, extractor: EmbedderConfig = EVAL_EXTRACTOR,
             preprocess: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Extractor features; ``preprocess`` (resize, normalisation) runs on the images first."""
    images = np.asarray(images)
    if preprocess is not None:
        images = preprocess(images)
    return embed_patch(images, extractor).astype(np.float64)


def fid(images_a: np.ndarray, images_b: np.ndarray, extractor: EmbedderConfig = EVAL_EXTRACTOR,
        eps_reg: float = 1e-6) -> float:
    return frechet_distance(FeatureStats.from_features(features(images_a, extractor)),
                            FeatureStats.from_features(features(images_b, extractor)), eps_reg)


full_image_fid = fid


def random_crops(images: np.ndarray, crop: int, n_crops: int, seed: int) -> np.ndarray:
    """Seeded uniform crops; image indices cycle through successive seeded permutations."""
    images = np.asarray(images)
    n, h, w = images.shape[:3]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    if (crop, crop) == (h, w) and n_crops == n:
        # whole images: keep input order so crop_fid is bit-equal to fid
        return images.copy()
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(n) for _ in range(-(-n_crops // n))])[:n_crops]
    ys = rng.integers(0, h - crop + 1, n_crops)
    xs = rng.integers(0, w - crop + 1, n_crops)
    return np.stack([images[i, y:y + crop, x:x + crop] for i, y, x in zip(order, ys, xs)])


def crop_fid(big: np.ndarray, patches: np.ndarray, crop: int, n_crops: int,
             extractor: EmbedderConfig = EVAL_EXTRACTOR, seed: int = 0, eps_reg: float = 1e-6) -> float:
    """FID between random crops of large images and a set of real patches."""
    return fid(random_crops(big, crop, n_crops, seed), patches, extractor, eps_reg)


def _poly_kernel(x: np.ndarray, y: np.ndarray, degree: int) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, degree: int = 3) -> float:
    m, n = len(x), len(y)
    kxx = _poly_kernel(x, x, degree)
    kyy = _poly_kernel(y, y, degree)
    kxy = _poly_kernel(x, y, degree)
    return float((kxx.sum() - np.trace(kxx)) / (m * (m - 1)) + (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
                 - 2.0 * kxy.mean())


def kid(feats_a: np.ndarray, feats_b: np.ndarray, degree: int = 3, subset_size: int = 100,
        subsets: int = 50, seed: int = 0) -> float:
    """Unbiased polynomial-kernel MMD^2 averaged over seeded subsets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if min(len(a), len(b)) < subset_size or subset_size < 2:
        raise ValueError(f"KID needs at least subset_size={subset_size} (>= 2) samples per set, "
                         f"got {len(a)} and {len(b)}")
    rng = np.random.default_rng(seed)
    vals = [mmd2_unbiased(a[rng.choice(len(a), subset_size, replace=False)],
                          b[rng.choice(len(b), subset_size, replace=False)], degree) for _ in range(subsets)]
    return float(np.mean(vals))


def embedding_similarity(real: np.ndarray, synth: np.ndarray,
                         extractor: EmbedderConfig = EVAL_EXTRACTOR) -> float:
    if len(real) != len(synth):
        raise ValueError(f"sets must be paired 1:1, got {len(real)} real and {len(synth)} synthetic")
    return float(cosine(features(real, extractor), features(synth, extractor)).mean())


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` positions and channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    view = np.lib.stride_tricks.sliding_window_view
    wa = view(a, (window, window), axis=(0, 1))
    wb = view(b, (window, window), axis=(0, 1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = (wa * wa).mean(axis=(-2, -1)) - mu_a ** 2
    var_b = (wb * wb).mean(axis=(-2, -1)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return float(10.0 * np.log10(max_val ** 2 / mse))


def _binary(m, what: str) -> np.ndarray:
    m = np.asarray(m)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{what} mask must be binary")
    return m.astype(bool)


def dice_iou(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, float, float]:
    """(dice, iou, pixel accuracy); two empty masks score (1, 1, 1)."""
    p, g = _binary(pred, "predicted"), _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = np.count_nonzero(p & g)
    union = np.count_nonzero(p | g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    acc = float(np.count_nonzero(p == g) / p.size)
    if union == 0:
        return 1.0, 1.0, acc
    return 2.0 * inter / total, inter / union, acc


def knn_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int) -> np.ndarray:
    """Majority vote over the k nearest training points by cosine distance.

    Distance ties go to the lower training index; vote ties to the smallest class.
    """
    train_y = np.asarray(train_y)
    dist = 1.0 - cosine(np.asarray(test_x)[:, None, :], np.asarray(train_x)[None, :, :])
    nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
    n_cls = int(train_y.max()) + 1
    votes = np.zeros((len(nn), n_cls), dtype=np.int64)
    for j in range(k):
        np.add.at(votes, (np.arange(len(nn)), train_y[nn[:, j]]), 1)
    return votes.argmax(axis=1)


def knn_balanced_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                          test_y: np.ndarray, k: int = 5) -> float:
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if k < 1 or k > len(train_y):
        raise ValueError(f"k={k} must lie in [1, {len(train_y)}]")
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ValueError("k-NN evaluation needs at least 2 classes")
    pred = knn_predict(train_x, train_y, test_x, k)
    recalls = []
    for c in np.union1d(classes, np.unique(test_y)):
        sel = test_y == c
        if not sel.any():
            raise ValueError(f"class {c} has no test examples")
        recalls.append(float((pred[sel] == c).mean()))
    return float(np.mean(recalls))


# reports and caches -----------------------------------------------------------------------

@dataclass
class MetricReport:
    metric: str
    value: float
    protocol: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def corpus_hash(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype="<f4").tobytes()).hexdigest()


def cached_features(images: np.ndarray, extractor: EmbedderConfig, cache_dir) -> np.ndarray:
    """Features keyed by (extractor id, corpus hash) in an append-only LFTN pack."""
    cache = storage.PackCache(cache_dir, "features")
    key = f"{extractor.extractor_id}:{corpus_hash(images)}"
    if key not in cache:
        cache.put(key, key, features(images, extractor).astype(np.float32))
    return cache.get(key).astype(np.float64)
