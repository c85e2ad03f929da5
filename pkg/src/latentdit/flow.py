"""Rectified flow between condition-embedding domains and the tile translation pipeline."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .autodiff import functional as F
from .backbone import _xavier, to_tensors
from .embedder import embed_grid
from .model import DiffusionModel
from .pipeline import TrainConfig, fit, sample_from_grid, tile_seed
from .samplers import SamplerConfig

Params = Dict[str, np.ndarray]


class TranslationError(RuntimeError):
    """A component failed while translating one tile; the message names the tile."""


@dataclass(frozen=True)
class FlowConfig:
    dim: int = 32
    width: int = 128
    depth: int = 4
    time_features: int = 16
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    euler_steps: int = 50

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; (B,) -> (B, n)."""
    half = n // 2
    freqs = np.pi * 2.0 ** np.arange(half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def init_velocity_net(cfg: FlowConfig) -> Params:
    """Residual MLP with a zero output layer, so a fresh net is the identity flow."""
    rng = np.random.default_rng(cfg.seed)
    w = cfg.width
    P: Params = {
        "in.weight": _xavier(rng, w, cfg.dim + cfg.time_features),
        "in.bias": np.zeros(w, np.float32),
        "out.weight": np.zeros((cfg.dim, w), np.float32),
        "out.bias": np.zeros(cfg.dim, np.float32),
    }
    for i in range(cfg.depth):
        P[f"res.{i}.fc1.weight"] = _xavier(rng, w, w)
        P[f"res.{i}.fc1.bias"] = np.zeros(w, np.float32)
        P[f"res.{i}.fc2.weight"] = _xavier(rng, w, w) * np.float32(1.0 / math.sqrt(cfg.depth))
        P[f"res.{i}.fc2.bias"] = np.zeros(w, np.float32)
    return P


def constant_velocity_net(cfg: FlowConfig, c: np.ndarray) -> Params:
    """A net whose output is ``c`` everywhere."""
    P = init_velocity_net(cfg)
    P["out.bias"] = np.asarray(c, np.float32).copy()
    return P


def depth_of(P: Mapping) -> int:
    return len([k for k in P if k.endswith(".fc1.weight")])


def velocity(P: Mapping[str, Tensor], x: np.ndarray, t: np.ndarray, n_time: int) -> Tensor:
    x = np.asarray(x, dtype=np.float32)
    dim = P["out.bias"].data.shape[0]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"velocity net expects (B, {dim}) inputs, got {x.shape}")
    h = F.linear(Tensor(np.concatenate([x, time_features(t, n_time)], axis=1)), P["in.weight"], P["in.bias"])
    for i in range(depth_of(P)):
        r = F.linear(F.layer_norm(h), P[f"res.{i}.fc1.weight"], P[f"res.{i}.fc1.bias"])
        h = h + F.linear(F.silu(r), P[f"res.{i}.fc2.weight"], P[f"res.{i}.fc2.bias"])
    return F.linear(F.silu(h), P["out.weight"], P["out.bias"])


def flow_loss(P: Mapping[str, Tensor], x0: np.ndarray, x1: np.ndarray, t: np.ndarray,
              n_time: int = 16) -> Tensor:
    """Batch mean of ||(x1 - x0) - v(x_t, t)||^2 with x_t = (1 - t) x0 + t x1."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"source {x0.shape} and target {x1.shape} embeddings differ in shape")
    t = np.asarray(t, dtype=np.float64)
    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    v = velocity(P, xt, t, n_time)
    diff = Tensor((x1 - x0).astype(np.float32)) - v
    return F.sum(F.square(diff)) * (1.0 / x0.shape[0])


def translate(x0: np.ndarray, P: Mapping[str, np.ndarray], steps: int = 50, n_time: int = 16) -> np.ndarray:
    """Explicit Euler integration of dx/dt = v(x, t) from t=0 to t=1 (deterministic)."""
    if steps < 1:
        raise ValueError("translate needs at least one step")
    x = np.array(x0, dtype=np.float64, ndmin=2)
    T = to_tensors(P)
    dt = 1.0 / steps
    with no_grad():
        for k in range(steps):
            v = velocity(T, x, np.full(x.shape[0], k * dt), n_time).data.astype(np.float64)
            x = x + dt * v
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite flow state at Euler step {k + 1}")
    return x.reshape(np.shape(x0))


def train_flow(x0: np.ndarray, x1: np.ndarray, cfg: FlowConfig = FlowConfig(), log=None,
               pair_filter: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
               ) -> Tuple[Params, List[float]]:
    """Fit the velocity net on paired embeddings.

    ``pair_filter(x0, x1)`` may return a boolean keep-mask to drop badly aligned pairs.
    """
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape or x0.shape[1] != cfg.dim:
        raise ValueError(f"flow pairs must both be (N, {cfg.dim}); got {x0.shape} and {x1.shape}")
    if pair_filter is not None:
        keep = np.asarray(pair_filter(x0, x1), dtype=bool)
        x0, x1 = x0[keep], x1[keep]
        if len(x0) == 0:
            raise ValueError("pair_filter removed every pair")
    P = init_velocity_net(cfg)
    n = len(x0)

    def loss_fn(T, rng):
        idx = rng.choice(n, cfg.batch, replace=n < cfg.batch)
        return flow_loss(T, x0[idx], x1[idx], rng.random(cfg.batch), cfg.time_features)

    tcfg = TrainConfig(lr=cfg.lr, weight_decay=cfg.weight_decay, dropout=0.0, seed=cfg.seed)
    losses = fit(P, list(P), loss_fn, cfg.steps, tcfg, log)
    return P, losses


def translate_grid(tokens: np.ndarray, P: Mapping[str, np.ndarray], steps: int, n_time: int = 16) -> np.ndarray:
    flat = tokens.reshape(-1, tokens.shape[-1])
    return translate(flat, P, steps, n_time).reshape(tokens.shape).astype(np.float32)


def stain_translate_pipeline(sources: Sequence[np.ndarray], flow: Mapping[str, np.ndarray],
                             model: DiffusionModel, sampler: SamplerConfig,
                             flow_steps: int = 50, n_time: int = 16,
                             indices: Optional[Sequence[int]] = None) -> List[np.ndarray]:
    """Per tile: embed, translate the embedding grid, sample conditioned on it, decode.

    Tiles are independent; tile ``i`` uses sampler seed ``tile_seed(seed, indices[i], 0)``
    (``indices`` defaults to 0..n-1), so any subset can be processed in any order.
    """
    dim = flow["out.bias"].shape[0]
    if dim != model.embedder.dim:
        raise ValueError(f"flow dimension {dim} differs from embedder dimension {model.embedder.dim}")
    eps_fn = model.eps_fn()
    indices = list(range(len(sources))) if indices is None else list(indices)
    if len(indices) != len(sources):
        raise ValueError("need one index per source tile")
    out = []
    for i, img in zip(indices, sources):
        try:
            side = model.image_size
            if np.shape(img)[:2] != (side, side):
                raise ValueError(f"tile is {np.shape(img)[:2]}, model samples {side}x{side}")
            tokens = embed_grid(np.asarray(img), model.grid_side, model.grid_side, model.embedder).tokens
            target = translate_grid(tokens, flow, flow_steps, n_time)
            out.append(sample_from_grid(model, target, sampler, tile_seed(sampler.seed, i, 0), eps_fn))
        except Exception as exc:
            raise TranslationError(f"tile {i}: {exc}") from exc
    return out
