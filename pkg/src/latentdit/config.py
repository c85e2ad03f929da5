"""One serializable document holding every run setting."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Mapping

from .backbone import BackboneConfig
from .diffusion import ScheduleConfig
from .flow import FlowConfig
from .pipeline import StageSpec, TrainConfig
from .samplers import SamplerConfig


class ConfigError(ValueError):
    pass


def _deep_merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, Mapping) and out[k]:
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    seed: int = 0
    schedule: Dict[str, Any] = field(default_factory=lambda: ScheduleConfig().to_dict())
    backbone: Dict[str, Any] = field(default_factory=lambda: BackboneConfig().to_dict())
    # toy learning rate; the full-scale setting is 2e-5
    train: Dict[str, Any] = field(default_factory=lambda: {"lr": 1e-3, "weight_decay": 0.03, "dropout": 0.1,
                                                           "log_every": 10})
    stages: Dict[str, Any] = field(default_factory=lambda: {
        "1": {"steps": 1000, "batch": 32}, "2": {"steps": 500, "batch": 16}, "3": {"steps": 500, "batch": 8}})
    sampler: Dict[str, Any] = field(default_factory=lambda: {"kind": "dpm2", "steps": 20, "guidance": 1.0})
    controlnet: Dict[str, Any] = field(default_factory=lambda: {"steps": 500, "batch": 16, "scale": 1.0})
    lora: Dict[str, Any] = field(default_factory=lambda: {"rank": 4, "alpha": 4.0, "steps": 300, "batch": 32})
    flow: Dict[str, Any] = field(default_factory=lambda: {k: v for k, v in FlowConfig().to_dict().items()
                                                          if k != "seed"})
    eval: Dict[str, Any] = field(default_factory=lambda: {"extractor_seed": 1001, "eps_reg": 1e-6,
                                                          "crop": 8, "n_crops": 2000, "kid_subset": 100,
                                                          "kid_subsets": 50})
    ingest: Dict[str, Any] = field(default_factory=lambda: {"size": 32, "stride": None, "test_fraction": 0.1,
                                                            "background": 0.85, "min_fraction": 0.25})

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        merged = _deep_merge(asdict(cls()), d)
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc.get("run", doc))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    # typed views -----------------------------------------------------------------------

    def schedule_cfg(self) -> ScheduleConfig:
        return ScheduleConfig(**self.schedule)

    def backbone_cfg(self) -> BackboneConfig:
        return BackboneConfig.from_dict(self.backbone)

    def train_cfg(self, seed_offset: int = 0) -> TrainConfig:
        return TrainConfig(seed=self.seed + seed_offset, **self.train)

    def stage_spec(self, stage: int) -> StageSpec:
        s = self.stages[str(stage)]
        return StageSpec(stage=stage, steps=int(s["steps"]), batch=int(s["batch"]))

    def sampler_cfg(self, **over) -> SamplerConfig:
        d = dict(self.sampler, seed=self.seed)
        d.update(over)
        return SamplerConfig(**d)

    def flow_cfg(self) -> FlowConfig:
        return FlowConfig(seed=self.seed, **self.flow)

    def validate(self) -> None:
        try:
            self.schedule_cfg()
            self.backbone_cfg()
            self.train_cfg()
            for s in (1, 2, 3):
                self.stage_spec(s)
            self.sampler_cfg()
            self.flow_cfg()
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
