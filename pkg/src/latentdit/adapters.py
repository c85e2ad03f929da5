"""ControlNet branch and LoRA adapters on top of a frozen backbone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .backbone import DiT, LoraTensors, Params, StageContractError, _xavier, block_param_shapes
from .codec import space_to_depth


class FrozenParameterError(RuntimeError):
    """A frozen base parameter received a gradient."""


class AdapterHashError(ValueError):
    """Adapter checkpoint does not belong to the supplied base checkpoint."""


# ControlNet ------------------------------------------------------------------------

def init_control_branch(base: Mapping[str, np.ndarray], cfg, codec_factor: int, seed: int) -> Params:
    """Copy every backbone block, add zero-initialised output linears and a mask encoder."""
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    mask_in = (codec_factor * cfg.patch_size) ** 2
    branch: Params = {
        "ctrl.mask.fc1.weight": _xavier(rng, d, mask_in),
        "ctrl.mask.fc1.bias": np.zeros(d, np.float32),
        "ctrl.mask.fc2.weight": _xavier(rng, d, d),
        "ctrl.mask.fc2.bias": np.zeros(d, np.float32),
    }
    for i in range(cfg.depth):
        for name in block_param_shapes(cfg):
            branch[f"ctrl.blocks.{i}.{name}"] = np.array(base[f"blocks.{i}.{name}"], copy=True)
        branch[f"ctrl.zero.{i}.weight"] = np.zeros((d, d), np.float32)
        branch[f"ctrl.zero.{i}.bias"] = np.zeros(d, np.float32)
    return branch


def mask_tokens(mask: np.ndarray, codec_factor: int, patch_size: int) -> np.ndarray:
    """(B, H, W) binary mask -> (B, N, (f p)^2) tokens aligned with latent tokens."""
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("cell mask must be binary")
    k = codec_factor * patch_size
    b, h, w = mask.shape
    if h % k or w % k:
        raise ValueError(f"mask {h}x{w} not divisible by {k}")
    y = space_to_depth(mask[..., None].astype(np.float32), k)
    return y.reshape(b, -1, k * k)


def control_forward(dit: DiT, P: Mapping[str, Tensor], x: np.ndarray, t, cond, mask: np.ndarray,
                    scale: float, codec_factor: int, drop=None,
                    lora: Optional[LoraTensors] = None) -> Tensor:
    """Base forward with ControlNet residuals ``scale * zero_linear_i(branch_i)`` added per block."""
    b, hh, ww, _ = x.shape
    if mask.shape[-2:] != (hh * codec_factor, ww * codec_factor):
        raise StageContractError(f"mask {mask.shape[-2:]} does not match image size "
                         f"{(hh * codec_factor, ww * codec_factor)} of latent {x.shape[1:3]}")
    h, temb, ctok = dit.prepare(P, x, t, cond, drop)
    if scale != 0.0:
        m = Tensor(mask_tokens(np.broadcast_to(mask, (b,) + mask.shape[-2:]), codec_factor, dit.cfg.patch_size))
        m = dit.lin(P, "ctrl.mask.fc2", F.silu(dit.lin(P, "ctrl.mask.fc1", m)))
        hc = h + m
    for i in range(dit.cfg.depth):
        h = dit.block(P, f"blocks.{i}", h, temb, ctok, lora)
        if scale != 0.0:
            hc = dit.block(P, f"ctrl.blocks.{i}", hc, temb, ctok)
            h = h + dit.lin(P, f"ctrl.zero.{i}", hc) * scale
    return dit.head(P, h, temb, x.shape)


def mask_agreement(image: np.ndarray, mask: np.ndarray, threshold: float = 0.5) -> float:
    """IoU between a darkness-thresholded density proxy of ``image`` and ``mask``."""
    from .metrics import dice_iou

    density = 1.0 - np.clip(np.asarray(image, dtype=np.float64), 0, 1).mean(axis=-1)
    pred = (density > threshold).astype(np.uint8)
    return dice_iou(pred, np.asarray(mask, dtype=np.uint8))[1]


# LoRA --------------------------------------------------------------------------------

@dataclass
class LoraAdapter:
    """Low-rank delta (alpha / r) B A for a (d, k) weight: A is (r, k), B is (d, r)."""

    A: np.ndarray
    B: np.ndarray
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return (self.scale * (self.B.astype(np.float64) @ self.A.astype(np.float64))).astype(np.float32)


def new_lora(d: int, k: int, rank: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
    if rank > min(d, k) or rank < 1:
        raise ValueError(f"LoRA rank {rank} must lie in [1, min({d}, {k})]")
    A = (rng.standard_normal((rank, k)) / np.sqrt(k)).astype(np.float32)
    return LoraAdapter(A=A, B=np.zeros((d, rank), np.float32), alpha=alpha)


def lora_apply(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """W + (alpha / r) B A; ``W`` itself is not modified."""
    d, k = W.shape
    if adapter.A.shape[1] != k or adapter.B.shape[0] != d or adapter.B.shape[1] != adapter.A.shape[0]:
        raise ValueError(f"adapter shapes A{adapter.A.shape} B{adapter.B.shape} do not fit weight {W.shape}")
    if adapter.rank > min(d, k):
        raise ValueError(f"LoRA rank {adapter.rank} exceeds min({d}, {k})")
    return W + adapter.delta()


def lora_targets(cfg) -> List[str]:
    return [f"blocks.{i}.{part}.{proj}.weight"
            for i in range(cfg.depth) for part in ("attn", "cross") for proj in ("q", "k", "v", "o")]


def init_lora(base: Mapping[str, np.ndarray], targets: List[str], rank: int = 4, alpha: float = 4.0,
              seed: int = 0) -> Dict[str, LoraAdapter]:
    rng = np.random.default_rng(seed)
    return {name: new_lora(*base[name].shape, rank, alpha, rng) for name in targets}


def lora_param_count(adapters: Mapping[str, LoraAdapter]) -> int:
    return int(sum(a.A.size + a.B.size for a in adapters.values()))


def lora_flat(adapters: Mapping[str, LoraAdapter]) -> Params:
    out: Params = {}
    for name, a in adapters.items():
        out[f"lora.{name}.A"] = a.A
        out[f"lora.{name}.B"] = a.B
    return out


def lora_from_flat(flat: Mapping[str, np.ndarray], alpha: float) -> Dict[str, LoraAdapter]:
    names = sorted({k[len("lora."):-2] for k in flat if k.startswith("lora.")})
    return {n: LoraAdapter(A=flat[f"lora.{n}.A"], B=flat[f"lora.{n}.B"], alpha=alpha) for n in names}


def lora_tensors(T: Mapping[str, Tensor], adapters: Mapping[str, LoraAdapter]) -> LoraTensors:
    """Bind flat ``lora.*`` tensors from ``T`` into the structure the backbone consumes."""
    scales = {a.scale for a in adapters.values()}
    if len(scales) > 1:
        raise ValueError("all adapters in a set must share alpha / r")
    pairs = {n: (T[f"lora.{n}.A"], T[f"lora.{n}.B"]) for n in adapters}
    return LoraTensors(pairs, scales.pop() if scales else 1.0)
