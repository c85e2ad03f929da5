"""Latent diffusion transformer with cross-attention to condition tokens.

Blocks follow the adaLN-zero recipe: a per-block linear map of the timestep
embedding yields shift/scale/gate triples for self-attention, cross-attention
and the MLP, all initialised to zero so every block starts as the identity.
Condition tokens get their own 2-D sinusoidal positions aligned with the
latent region they describe.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

Params = Dict[str, np.ndarray]


class StageContractError(ValueError):
    """Condition token count does not match the latent size."""


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 12
    patch_size: int = 2
    hidden_dim: int = 64
    depth: int = 4
    heads: int = 4
    cond_dim: int = 32
    mlp_ratio: int = 4
    cond_region: int = 4  # latent pixels per condition token side
    max_tokens: int = 64
    T: int = 1000

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4 for 2-D positional encodings")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        return cls(**dict(d))


# numpy helpers ------------------------------------------------------------------

def patchify(lat: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)(W/p), p*p*C), tokens row-major."""
    b, h, w, c = lat.shape
    if h % p or w % p:
        raise ValueError(f"latent {h}x{w} not divisible by patch size {p}")
    y = lat.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(b, (h // p) * (w // p), p * p * c))


def unpatchify(tokens: np.ndarray, gh: int, gw: int, p: int, c: int) -> np.ndarray:
    b = tokens.shape[0]
    y = tokens.reshape(b, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(y.reshape(b, gh * p, gw * p, c))


@lru_cache(maxsize=64)
def sincos_2d(rows: int, cols: int, dim: int, spacing: float) -> np.ndarray:
    """Positions of a rows x cols grid whose cells are ``spacing`` latent pixels wide."""
    ys = (np.arange(rows) + 0.5) * spacing
    xs = (np.arange(cols) + 0.5) * spacing
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    quarter = dim // 4
    omega = 1.0 / 100.0 ** (np.arange(quarter) / quarter)

    def enc(pos):
        a = pos.reshape(-1)[:, None] * omega[None, :]
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    out = np.concatenate([enc(yy), enc(xx)], axis=1).astype(np.float32)
    out.setflags(write=False)
    return out


def timestep_sinusoid(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


# parameters ----------------------------------------------------------------------

def _xavier(rng, fan_out, fan_in):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(np.float32)


def block_param_shapes(cfg: BackboneConfig) -> Dict[str, tuple]:
    d = cfg.hidden_dim
    shapes = {"mod.weight": (9 * d, d), "mod.bias": (9 * d,)}
    for part in ("attn", "cross"):
        for proj in ("q", "k", "v", "o"):
            shapes[f"{part}.{proj}.weight"] = (d, d)
            shapes[f"{part}.{proj}.bias"] = (d,)
    hid = cfg.mlp_ratio * d
    shapes.update({"mlp.fc1.weight": (hid, d), "mlp.fc1.bias": (hid,),
                   "mlp.fc2.weight": (d, hid), "mlp.fc2.bias": (d,)})
    return shapes


def init_params(cfg: BackboneConfig, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d, p, c = cfg.hidden_dim, cfg.patch_size, cfg.latent_channels
    tok = p * p * c
    P: Params = {
        "x_embed.weight": _xavier(rng, d, tok),
        "x_embed.bias": np.zeros(d, np.float32),
        "t_embed.fc1.weight": rng.normal(0, 0.02, (d, d)).astype(np.float32),
        "t_embed.fc1.bias": np.zeros(d, np.float32),
        "t_embed.fc2.weight": rng.normal(0, 0.02, (d, d)).astype(np.float32),
        "t_embed.fc2.bias": np.zeros(d, np.float32),
        "c_embed.weight": _xavier(rng, d, cfg.cond_dim),
        "c_embed.bias": np.zeros(d, np.float32),
        "null_token": (rng.standard_normal((1, cfg.cond_dim)) / np.sqrt(cfg.cond_dim)).astype(np.float32),
    }
    for i in range(cfg.depth):
        for name, shape in block_param_shapes(cfg).items():
            full = f"blocks.{i}.{name}"
            if name.startswith("mod.") or name.endswith(".bias"):
                P[full] = np.zeros(shape, np.float32)
            else:
                P[full] = _xavier(rng, *shape)
    P["final.mod.weight"] = np.zeros((2 * d, d), np.float32)
    P["final.mod.bias"] = np.zeros(2 * d, np.float32)
    P["final.linear.weight"] = np.zeros((tok, d), np.float32)
    P["final.linear.bias"] = np.zeros(tok, np.float32)
    return P


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def null_condition(params: Mapping[str, np.ndarray]) -> np.ndarray:
    """The learned unconditional token, shape (1, cond_dim)."""
    return params["null_token"]


def to_tensors(params: Mapping[str, np.ndarray], trainable=()) -> Dict[str, Tensor]:
    trainable = set(trainable)
    return {k: Tensor(v, requires_grad=k in trainable, name=k) for k, v in params.items()}


# model ---------------------------------------------------------------------------

class LoraTensors:
    """Low-rank deltas applied on the fly: W_eff = W + scale * B @ A."""

    def __init__(self, pairs: Mapping[str, Tuple[Tensor, Tensor]], scale: float):
        self.pairs = dict(pairs)
        self.scale = scale


class DiT:
    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg

    # pieces reused by the ControlNet forward

    def weight(self, P, name: str, lora: Optional[LoraTensors]) -> Tensor:
        w = P[name]
        if lora is not None and name in lora.pairs:
            a, b = lora.pairs[name]
            w = w + F.matmul(b, a) * lora.scale
        return w

    def lin(self, P, prefix: str, x: Tensor, lora: Optional[LoraTensors] = None) -> Tensor:
        return F.linear(x, self.weight(P, prefix + ".weight", lora), P[prefix + ".bias"])

    def grid_of(self, x: np.ndarray) -> Tuple[int, int]:
        p = self.cfg.patch_size
        return x.shape[1] // p, x.shape[2] // p

    def timestep_embedding(self, P, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if np.any(t < 1) or np.any(t > self.cfg.T):
            raise ValueError(f"timestep out of range [1, {self.cfg.T}]: {t}")
        s = Tensor(timestep_sinusoid(t, self.cfg.hidden_dim))
        h = F.silu(self.lin(P, "t_embed.fc1", s))
        return self.lin(P, "t_embed.fc2", h)

    def condition_tokens(self, P, cond: Optional[np.ndarray], batch: int, rows: int, cols: int,
                         drop: Optional[np.ndarray]) -> Tensor:
        cfg = self.cfg
        m = rows * cols
        if cond is None:
            keep = np.zeros(batch, dtype=bool)
            cond = np.zeros((batch, m, cfg.cond_dim), np.float32)
        else:
            cond = np.asarray(cond)
            if cond.ndim == 4:
                cond = cond.reshape(cond.shape[0], -1, cond.shape[-1])
            if cond.shape[1] != m:
                raise StageContractError(
                    f"expected {m} condition tokens ({rows}x{cols}) for this latent, got {cond.shape[1]}")
            if cond.shape[0] != batch or cond.shape[2] != cfg.cond_dim:
                raise StageContractError(f"condition shape {cond.shape} does not match batch {batch}"
                                         f" / cond_dim {cfg.cond_dim}")
            keep = np.ones(batch, dtype=bool) if drop is None else ~np.asarray(drop, dtype=bool)
        k = keep.astype(np.float32)[:, None, None]
        tokens = Tensor(cond * k)
        if not keep.all():
            null = F.broadcast_to(F.reshape(P["null_token"], (1, 1, cfg.cond_dim)), (batch, m, cfg.cond_dim))
            tokens = tokens + null * (1.0 - k)
        h = self.lin(P, "c_embed", tokens)
        pos = sincos_2d(rows, cols, cfg.hidden_dim, float(cfg.cond_region))
        return h + Tensor(pos)

    def prepare(self, P, x: np.ndarray, t, cond, drop=None):
        cfg = self.cfg
        b, hh, ww, c = x.shape
        if c != cfg.latent_channels:
            raise ValueError(f"latent has {c} channels, backbone expects {cfg.latent_channels}")
        if hh % cfg.cond_region or ww % cfg.cond_region:
            raise StageContractError(f"latent {hh}x{ww} is not a whole number of condition regions")
        gh, gw = self.grid_of(x)
        if gh * gw > cfg.max_tokens:
            raise StageContractError(f"{gh * gw} latent tokens exceed max_tokens={cfg.max_tokens}")
        tokens = Tensor(patchify(np.asarray(x, dtype=np.float32), cfg.patch_size))
        h = self.lin(P, "x_embed", tokens) + Tensor(sincos_2d(gh, gw, cfg.hidden_dim, float(cfg.patch_size)))
        temb = self.timestep_embedding(P, np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)))
        ctok = self.condition_tokens(P, cond, b, hh // cfg.cond_region, ww // cfg.cond_region, drop)
        return h, temb, ctok

    def _heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        nh = self.cfg.heads
        return F.transpose(F.reshape(x, (b, n, nh, d // nh)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, nh, n, dh = x.shape
        return F.reshape(F.transpose(x, (0, 2, 1, 3)), (b, n, nh * dh))

    def _attend(self, P, prefix, xq: Tensor, xkv: Tensor, lora) -> Tensor:
        q = self._heads(self.lin(P, prefix + ".q", xq, lora))
        k = self._heads(self.lin(P, prefix + ".k", xkv, lora))
        v = self._heads(self.lin(P, prefix + ".v", xkv, lora))
        scale = 1.0 / np.sqrt(q.shape[-1])
        return self.lin(P, prefix + ".o", self._merge(F.attention(q, k, v, scale)), lora)

    def block(self, P, prefix: str, h: Tensor, temb: Tensor, ctok: Tensor,
              lora: Optional[LoraTensors] = None) -> Tensor:
        d = self.cfg.hidden_dim
        b = h.shape[0]
        mod = self.lin(P, prefix + ".mod", F.silu(temb))
        chunk = [F.getitem(mod, (slice(None), slice(i * d, (i + 1) * d))) for i in range(9)]

        def gated(x, gate, y):
            return x + F.reshape(gate, (b, 1, d)) * y

        a = F.modulate(F.layer_norm(h), chunk[0], chunk[1])
        h = gated(h, chunk[2], self._attend(P, prefix + ".attn", a, a, lora))
        a = F.modulate(F.layer_norm(h), chunk[3], chunk[4])
        h = gated(h, chunk[5], self._attend(P, prefix + ".cross", a, ctok, lora))
        a = F.modulate(F.layer_norm(h), chunk[6], chunk[7])
        m = self.lin(P, prefix + ".mlp.fc2", F.gelu(self.lin(P, prefix + ".mlp.fc1", a)))
        return gated(h, chunk[8], m)

    def head(self, P, h: Tensor, temb: Tensor, x_shape) -> Tensor:
        cfg = self.cfg
        d = cfg.hidden_dim
        mod = self.lin(P, "final.mod", F.silu(temb))
        shift = F.getitem(mod, (slice(None), slice(0, d)))
        scale = F.getitem(mod, (slice(None), slice(d, 2 * d)))
        out = self.lin(P, "final.linear", F.modulate(F.layer_norm(h), shift, scale))
        b, hh, ww, c = x_shape
        p = cfg.patch_size
        out = F.reshape(out, (b, hh // p, ww // p, p, p, c))
        out = F.transpose(out, (0, 1, 3, 2, 4, 5))
        return F.reshape(out, (b, hh, ww, c))

    def forward(self, P: Mapping[str, Tensor], x: np.ndarray, t, cond: Optional[np.ndarray],
                drop: Optional[np.ndarray] = None, lora: Optional[LoraTensors] = None) -> Tensor:
        """Predict noise for latents ``x`` (B, H, W, C) at timesteps ``t``.

        ``cond`` is (B, M, cond_dim) or (B, rows, cols, cond_dim); ``None`` means
        unconditional (null token everywhere). ``drop`` marks batch elements whose
        condition is replaced by the null token.
        """
        h, temb, ctok = self.prepare(P, x, t, cond, drop)
        for i in range(self.cfg.depth):
            h = self.block(P, f"blocks.{i}", h, temb, ctok, lora)
        return self.head(P, h, temb, x.shape)
