"""A trained backbone bundled with everything needed to sample from it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from . import storage
from .adapters import (AdapterHashError, LoraAdapter, control_forward, lora_flat, lora_from_flat,
                       lora_tensors)
from .autodiff import no_grad
from .backbone import DiT, BackboneConfig, Params, to_tensors
from .codec import CodecConfig, decode
from .diffusion import NoiseSchedule, ScheduleConfig
from .embedder import EmbedderConfig


class CheckpointMismatchError(ValueError):
    """Checkpoint configuration does not match what the caller expects."""


@dataclass
class LatentNorm:
    """Per-channel shift and a global scale taking codec latents to ~unit variance."""

    shift: np.ndarray
    scale: float

    @classmethod
    def fit(cls, latents: np.ndarray) -> "LatentNorm":
        lat = np.asarray(latents, dtype=np.float64)
        c = lat.shape[-1]
        flat = lat.reshape(-1, c)
        shift = flat.mean(axis=0)
        std = float(np.sqrt(((flat - shift) ** 2).mean()))
        return cls(shift=shift.astype(np.float32), scale=1.0 / max(std, 1e-8))

    @classmethod
    def identity(cls, channels: int) -> "LatentNorm":
        return cls(shift=np.zeros(channels, np.float32), scale=1.0)

    def normalize(self, lat: np.ndarray) -> np.ndarray:
        return ((np.asarray(lat, dtype=np.float32) - self.shift) * np.float32(self.scale)).astype(np.float32)

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float32) / np.float32(self.scale) + self.shift).astype(np.float32)

    def to_dict(self) -> dict:
        return {"shift": [float(v) for v in self.shift], "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LatentNorm":
        return cls(shift=np.asarray(d["shift"], np.float32), scale=float(d["scale"]))


@dataclass
class DiffusionModel:
    cfg: BackboneConfig
    params: Params
    norm: LatentNorm
    stage: int = 1
    step: int = 0
    codec: CodecConfig = field(default_factory=CodecConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    schedule_cfg: ScheduleConfig = field(default_factory=ScheduleConfig)
    meta: Dict = field(default_factory=dict)
    control: Optional[Params] = None
    lora: Optional[Dict[str, LoraAdapter]] = None

    def __post_init__(self):
        self.dit = DiT(self.cfg)
        self.schedule = NoiseSchedule(self.schedule_cfg)

    @property
    def image_size(self) -> int:
        """Side of the image a full stage-``stage`` latent decodes to."""
        side_tokens = {1: 1, 2: 2, 3: 4}[self.stage]
        return side_tokens * self.cfg.cond_region * self.codec.factor

    @property
    def grid_side(self) -> int:
        return {1: 1, 2: 2, 3: 4}[self.stage]

    def latent_shape(self, batch: int) -> tuple:
        side = self.image_size // self.codec.factor
        return (batch, side, side, self.cfg.latent_channels)

    def all_params(self) -> Params:
        merged = dict(self.params)
        if self.control is not None:
            merged.update(self.control)
        if self.lora is not None:
            merged.update(lora_flat(self.lora))
        return merged

    def eps_fn(self, mask: Optional[np.ndarray] = None, control_scale: float = 0.0):
        """Noise predictor ``(x, t, cond) -> eps`` evaluated without recording a tape."""
        T = to_tensors(self.all_params())
        lora = lora_tensors(T, self.lora) if self.lora else None
        use_control = self.control is not None and mask is not None

        def fn(x, t, cond):
            with no_grad():
                x32 = np.asarray(x, dtype=np.float32)
                if use_control:
                    out = control_forward(self.dit, T, x32, t, cond, mask, control_scale,
                                          self.codec.factor, lora=lora)
                else:
                    out = self.dit.forward(T, x32, t, cond, lora=lora)
            return out.data

        return fn

    def decode(self, z: np.ndarray) -> np.ndarray:
        return decode(self.norm.denormalize(z), self.codec)

    # persistence --------------------------------------------------------------

    def header(self) -> dict:
        return {
            "kind": "backbone",
            "config": self.cfg.to_dict(),
            "stage": self.stage,
            "step": self.step,
            "latent_norm": self.norm.to_dict(),
            "codec": {"factor": self.codec.factor, "seed": self.codec.seed},
            "embedder": {"dim": self.embedder.dim, "seed": self.embedder.seed, "gain": self.embedder.gain},
            "schedule": self.schedule_cfg.to_dict(),
            "meta": self.meta,
        }

    def save(self, path) -> str:
        return storage.save_checkpoint(path, self.params, self.header())

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        tensors, h = storage.load_checkpoint(path)
        if h.get("kind") != "backbone":
            raise CheckpointMismatchError(f"{path} is not a backbone checkpoint")
        return cls(cfg=BackboneConfig.from_dict(h["config"]), params={k: v.copy() for k, v in tensors.items()},
                   norm=LatentNorm.from_dict(h["latent_norm"]), stage=h["stage"], step=h["step"],
                   codec=CodecConfig(**h["codec"]), embedder=EmbedderConfig(**h["embedder"]),
                   schedule_cfg=ScheduleConfig(**h["schedule"]), meta=h.get("meta", {}))


def save_adapter(path, kind: str, tensors: Mapping[str, np.ndarray], base_hash: str, extra: Mapping) -> str:
    header = {"kind": kind, "base_sha256": base_hash, **dict(extra)}
    return storage.save_checkpoint(path, tensors, header)


def load_adapter(path, base_path) -> tuple:
    """Load an adapter checkpoint after verifying it references ``base_path``'s content hash."""
    tensors, header = storage.load_checkpoint(path)
    actual = storage.file_sha256(base_path)
    if header.get("base_sha256") != actual:
        raise AdapterHashError(f"adapter {path} was trained on base {header.get('base_sha256')}, "
                               f"but {base_path} hashes to {actual}")
    return tensors, header


def attach_adapter(model: DiffusionModel, tensors: Mapping[str, np.ndarray], header: Mapping) -> DiffusionModel:
    if header["kind"] == "lora":
        model.lora = lora_from_flat(tensors, float(header["alpha"]))
    elif header["kind"] == "controlnet":
        model.control = dict(tensors)
    else:
        raise CheckpointMismatchError(f"unknown adapter kind {header['kind']!r}")
    return model
