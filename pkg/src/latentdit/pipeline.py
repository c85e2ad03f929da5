"""Three-stage resolution curriculum, the training loop and reference variations.

Toy geometry: a full image is 32x32, its latent 16x16x12 and its condition
grid 4x4 (one token per 8x8 image tile, i.e. per 4x4 latent region).

    stage  crop side  crops/latent  tokens/crop
      1      1/4          16            1
      2      1/2           4            4
      3       1            1           16
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .adapters import (FrozenParameterError, control_forward, init_control_branch, init_lora, lora_flat,
                       lora_targets, lora_tensors)
from .autodiff import AdamState, Tensor, adamw_step
from .backbone import BackboneConfig, StageContractError, init_params, to_tensors
from .diffusion import ScheduleConfig, add_noise, epsilon_loss
from .embedder import ConditionGrid, embed_grid
from .model import CheckpointMismatchError, DiffusionModel, LatentNorm
from .samplers import SamplerConfig, sample

logger = logging.getLogger(__name__)

GRID_SIDE = 4


class StagePrerequisiteError(RuntimeError):
    """A stage was requested without the checkpoint of the stage before it."""


@dataclass(frozen=True)
class StageSpec:
    stage: int
    steps: int
    batch: int

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("stage needs steps >= 0 and batch >= 1")

    @property
    def crop_fraction(self) -> Fraction:
        return Fraction(1, 2 ** (3 - self.stage))

    @property
    def crops_per_latent(self) -> int:
        return int(1 / self.crop_fraction ** 2)

    @property
    def tokens_per_crop(self) -> int:
        return int((self.crop_fraction * GRID_SIDE) ** 2)

    @property
    def tokens_side(self) -> int:
        return int(self.crop_fraction * GRID_SIDE)

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_STAGES = {1: StageSpec(1, 1000, 32), 2: StageSpec(2, 500, 16), 3: StageSpec(3, 500, 8)}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-5
    weight_decay: float = 0.03
    optimizer: str = "adamw"
    dropout: float = 0.1
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("condition dropout must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# cropping ----------------------------------------------------------------------------------

def crop_regions(latent_side: int, spec: StageSpec, grid_side: int = GRID_SIDE) -> List[dict]:
    """Index arithmetic for every crop: its latent window and its token block."""
    n = int(1 / spec.crop_fraction)
    if latent_side % n or grid_side % n:
        raise ValueError(f"latent side {latent_side} / grid side {grid_side} not divisible into {n} crops")
    s, k = latent_side // n, grid_side // n
    return [{"crop": (i, j), "rows": (i * s, (i + 1) * s), "cols": (j * s, (j + 1) * s),
             "token_rows": (i * k, (i + 1) * k), "token_cols": (j * k, (j + 1) * k)}
            for i in range(n) for j in range(n)]


def crop_latents(lat: np.ndarray, grid, spec: StageSpec) -> List[Tuple[np.ndarray, ConditionGrid]]:
    """Non-overlapping row-major latent crops, each paired with the tokens covering it."""
    tokens = grid.tokens if isinstance(grid, ConditionGrid) else np.asarray(grid)
    if lat.shape[0] != lat.shape[1] or tokens.shape[0] != tokens.shape[1]:
        raise ValueError("crop_latents expects square latents and grids")
    if lat.shape[0] % tokens.shape[0]:
        raise ValueError(f"latent side {lat.shape[0]} is not a multiple of grid side {tokens.shape[0]}")
    out = []
    for r in crop_regions(lat.shape[0], spec, tokens.shape[0]):
        (y0, y1), (x0, x1) = r["rows"], r["cols"]
        (a0, a1), (b0, b1) = r["token_rows"], r["token_cols"]
        out.append((lat[y0:y1, x0:x1], ConditionGrid(tokens[a0:a1, b0:b1])))
    return out


def stitch_crops(crops: Sequence[np.ndarray], spec: StageSpec) -> np.ndarray:
    n = int(1 / spec.crop_fraction)
    rows = [np.concatenate(crops[i * n:(i + 1) * n], axis=1) for i in range(n)]
    return np.concatenate(rows, axis=0)


def crop_dataset(latents: np.ndarray, grids: np.ndarray, spec: StageSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Exhaustive crops of every latent: ((N*crops, s, s, C), (N*crops, k, k, D))."""
    xs, cs = [], []
    for lat, g in zip(latents, grids):
        for crop, sub in crop_latents(lat, g, spec):
            xs.append(crop)
            cs.append(sub.tokens)
    if not xs:
        raise ValueError("empty training corpus")
    return np.stack(xs).astype(np.float32), np.stack(cs).astype(np.float32)


# training loop --------------------------------------------------------------------------------

LossFn = Callable[[Dict[str, Tensor], np.random.Generator], Tensor]


def fit(params: Dict[str, np.ndarray], trainable: Sequence[str], loss_fn: LossFn, steps: int,
        cfg: TrainConfig, log: Optional[Callable[[dict], None]] = None,
        state: Optional[AdamState] = None) -> List[float]:
    """AdamW over ``trainable``; batch randomness for step k comes from rng([seed, k])."""
    trainable = list(trainable)
    frozen = [k for k in params if k not in set(trainable)]
    state = state or AdamState()
    losses = []
    t0 = time.perf_counter()
    for step in range(steps):
        rng = np.random.default_rng([cfg.seed, step])
        T = to_tensors(params, trainable)
        loss = loss_fn(T, rng)
        loss.backward()
        leaked = [k for k in frozen if T[k].grad is not None]
        if leaked:
            raise FrozenParameterError(f"frozen parameters received gradients: {leaked[:3]}")
        grads = {k: T[k].grad for k in trainable if T[k].grad is not None}
        adamw_step(params, grads, state, cfg.lr, weight_decay=cfg.weight_decay)
        value = float(loss.data)
        losses.append(value)
        if log is not None and (step % cfg.log_every == 0 or step == steps - 1):
            log({"step": step, "loss": value, "lr": cfg.lr, "wallclock": time.perf_counter() - t0})
    return losses


def diffusion_loss_fn(model: DiffusionModel, x_data: np.ndarray, c_data: np.ndarray, batch: int,
                      dropout: float, forward=None) -> LossFn:
    """Sample a batch, timesteps, noise and dropout flags; return the epsilon loss.

    ``forward(T, xt, t, cond, drop, idx)`` overrides the plain backbone call.
    """
    schedule = model.schedule
    n = len(x_data)

    def loss_fn(T, rng):
        idx = rng.choice(n, batch, replace=n < batch)
        t = rng.integers(1, schedule.T + 1, batch)
        eps = rng.standard_normal((batch,) + x_data.shape[1:])
        drop = rng.random(batch) < dropout
        x0 = x_data[idx]
        if forward is None:
            predict = lambda xt, tt, cond: model.dit.forward(T, xt, tt, cond, drop)  # noqa: E731
        else:
            predict = lambda xt, tt, cond: forward(T, xt, tt, cond, drop, idx)  # noqa: E731
        return epsilon_loss(predict, x0, c_data[idx], t, eps, schedule)

    return loss_fn


def smoothed(losses: Sequence[float], window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(losses, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def loss_summary(losses: Sequence[float], tail: int = 50) -> Tuple[float, float]:
    """(initial loss, mean of the last ``tail`` losses)."""
    if not len(losses):
        raise ValueError("no losses recorded")
    return float(losses[0]), float(np.mean(losses[-tail:]))


def steps_to_target(losses: Sequence[float], target: float, window: int = 20) -> int:
    """First step whose trailing mean is at or below ``target``; len(losses)+1 if never."""
    hit = np.flatnonzero(smoothed(losses, window)[window - 1:] <= target)
    return int(hit[0]) + window if hit.size else len(losses) + 1


def transfer_params(prev: Mapping[str, np.ndarray], fresh: Mapping[str, np.ndarray]) -> Tuple[Dict, int]:
    """Copy every name-matched parameter of ``prev`` over ``fresh``.

    Positions are sinusoidal and parameter-free, so nothing needs resizing.
    """
    out = {k: np.array(v, copy=True) for k, v in fresh.items()}
    n = 0
    for k, v in prev.items():
        if k in out:
            if out[k].shape != v.shape:
                raise CheckpointMismatchError(f"parameter {k} has shape {v.shape}, expected {out[k].shape}")
            out[k] = np.array(v, copy=True)
            n += 1
    return out, n


class JsonlLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, rec: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec) + "\n")


def train_stage(latents: np.ndarray, grids: np.ndarray, spec: StageSpec, cfg: TrainConfig,
                init: Optional[DiffusionModel] = None, backbone: Optional[BackboneConfig] = None,
                run_dir=None, norm: Optional[LatentNorm] = None,
                cold: bool = False, schedule: Optional[ScheduleConfig] = None
                ) -> Tuple[DiffusionModel, List[float]]:
    """Train one curriculum stage on full latents (N, 16, 16, C) and grids (N, 4, 4, D).

    Stage 1 starts from ``init_params(backbone, seed)`` unless ``init`` is given;
    stages 2 and 3 require ``init`` from the previous stage. Optimizer state is
    not carried across stages. ``cold=True`` lifts the prerequisite so a later
    stage can be trained from random init as an ablation.
    """
    if spec.stage > 1 and not cold:
        if init is None:
            raise StagePrerequisiteError(f"stage {spec.stage} requires a stage {spec.stage - 1} checkpoint")
    if init is not None and init.stage not in (spec.stage - 1, spec.stage):
        raise StagePrerequisiteError(f"cannot train stage {spec.stage} from a stage {init.stage} checkpoint")
    if init is not None and backbone is not None and backbone.to_dict() != init.cfg.to_dict():
        raise CheckpointMismatchError("backbone config differs from the initialising checkpoint")
    bcfg = init.cfg if init is not None else (backbone or BackboneConfig())

    fresh = init_params(bcfg, cfg.seed)
    transferred = 0
    if init is not None:
        params, transferred = transfer_params(init.params, fresh)
        norm = init.norm
    else:
        params = fresh
        norm = norm or LatentNorm.fit(latents)
    if init is not None:
        schedule = init.schedule_cfg
    model = DiffusionModel(cfg=bcfg, params=params, norm=norm, stage=spec.stage,
                           schedule_cfg=schedule or ScheduleConfig(),
                           step=init.step if init is not None else 0,
                           meta={"train": cfg.to_dict(), "stage_spec": spec.to_dict(),
                                 "transferred": transferred})
    x_data, c_data = crop_dataset(model.norm.normalize(latents), grids, spec)
    log = JsonlLog(Path(run_dir) / "logs" / f"stage{spec.stage}.jsonl") if run_dir else None
    loss_fn = diffusion_loss_fn(model, x_data, c_data, spec.batch, cfg.dropout)
    losses = fit(model.params, list(model.params), loss_fn, spec.steps, cfg, log)
    model.step += spec.steps
    if run_dir:
        model.save(Path(run_dir) / "checkpoints" / f"stage{spec.stage}_step{model.step}.ckpt")
    return model, losses


# variations ----------------------------------------------------------------------------------

def tile_seed(seed: int, tile: int, k: int) -> int:
    """Sampler seed for output ``k`` of reference tile ``tile``."""
    return int(np.random.SeedSequence([seed, tile, k]).generate_state(1)[0])


def reference_grid(image: np.ndarray, model: DiffusionModel) -> np.ndarray:
    side = model.image_size
    if image.shape[:2] != (side, side):
        raise StageContractError(f"stage-{model.stage} model samples {side}x{side} images, "
                                 f"reference is {image.shape[0]}x{image.shape[1]}")
    return embed_grid(image, model.grid_side, model.grid_side, model.embedder).tokens


def sample_from_grid(model: DiffusionModel, tokens: np.ndarray, sampler: SamplerConfig, seed: int,
                     eps_fn=None) -> np.ndarray:
    """Sample and decode one image from a (rows, cols, D) condition grid."""
    eps_fn = eps_fn or model.eps_fn()
    cfg = SamplerConfig(kind=sampler.kind, steps=sampler.steps, guidance=sampler.guidance, seed=seed)
    z = sample(eps_fn, tokens[None], model.latent_shape(1), cfg, model.schedule)
    return model.decode(z[0])


def generate_variations(references: Sequence[np.ndarray], model: DiffusionModel, n: int,
                        sampler: SamplerConfig, ids: Optional[Sequence[str]] = None
                        ) -> Tuple[List[List[np.ndarray]], List[dict]]:
    """``n`` samples per reference conditioned on its embedding grid, plus a manifest."""
    if n < 0:
        raise ValueError("n must be non-negative")
    ids = list(ids) if ids is not None else [f"ref{i:05d}" for i in range(len(references))]
    eps_fn = model.eps_fn()
    outputs, manifest = [], []
    for i, ref in enumerate(references):
        tokens = reference_grid(np.asarray(ref), model)
        images = []
        for k in range(n):
            seed = tile_seed(sampler.seed, i, k)
            images.append(sample_from_grid(model, tokens, sampler, seed, eps_fn))
            manifest.append({"id": f"{ids[i]}_var{k}", "reference": ids[i], "index": k, "seed": seed,
                             "sampler": sampler.to_dict()})
        outputs.append(images)
    return outputs, manifest


# adapter training ----------------------------------------------------------------------------

def stage_data(model: DiffusionModel, latents: np.ndarray, grids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Normalise full-resolution latents and crop them to the model's stage."""
    return crop_dataset(model.norm.normalize(latents), grids, StageSpec(model.stage, 0, 1))


def train_controlnet(base: DiffusionModel, latents: np.ndarray, grids: np.ndarray, masks: np.ndarray,
                     steps: int, batch: int, cfg: TrainConfig, scale: float = 1.0,
                     log=None) -> Tuple[DiffusionModel, List[float]]:
    """Train a ControlNet branch on stage-sized latents (N, h, w, C) with masks (N, H, W).

    Latents must already be at the model's stage size (no cropping); the base stays frozen.
    """
    expect = base.latent_shape(1)[1:3]
    if latents.shape[1:3] != expect:
        raise StageContractError(f"controlnet data latents are {latents.shape[1:3]}, stage {base.stage} "
                                 f"needs {expect}")
    masks = np.asarray(masks)
    base.control = init_control_branch(base.params, base.cfg, base.codec.factor, cfg.seed)
    x_data = base.norm.normalize(latents)
    c_data = np.asarray(grids, np.float32)
    f = base.codec.factor

    def forward(T, xt, t, cond, drop, idx):
        return control_forward(base.dit, T, xt, t, cond, masks[idx], scale, f, drop)

    loss_fn = diffusion_loss_fn(base, x_data, c_data, batch, cfg.dropout, forward)
    params = base.all_params()
    losses = fit(params, list(base.control), loss_fn, steps, cfg, log)
    return base, losses


def train_lora(base: DiffusionModel, latents: np.ndarray, grids: np.ndarray, steps: int, batch: int,
               cfg: TrainConfig, rank: int = 4, alpha: float = 4.0, log=None
               ) -> Tuple[DiffusionModel, List[float]]:
    """Fit LoRA adapters on the attention projections; base weights stay frozen."""
    base.lora = init_lora(base.params, lora_targets(base.cfg), rank, alpha, cfg.seed)
    x_data, c_data = stage_data(base, latents, grids)
    adapters = base.lora

    def forward(T, xt, t, cond, drop, idx):
        return base.dit.forward(T, xt, t, cond, drop, lora=lora_tensors(T, adapters))

    loss_fn = diffusion_loss_fn(base, x_data, c_data, batch, cfg.dropout, forward)
    params = base.all_params()
    losses = fit(params, list(lora_flat(adapters)), loss_fn, steps, cfg, log)
    return base, losses


def held_out_loss(model: DiffusionModel, x_data: np.ndarray, c_data: np.ndarray, batches: int = 8,
                  batch: int = 32, seed: int = 12345) -> float:
    """Mean epsilon loss over fixed seeded batches (no dropout, no tape)."""
    from .autodiff import no_grad

    eps_fn = model.eps_fn()
    losses = []
    schedule = model.schedule
    with no_grad():
        for k in range(batches):
            rng = np.random.default_rng([seed, k])
            idx = rng.choice(len(x_data), batch, replace=len(x_data) < batch)
            t = rng.integers(1, schedule.T + 1, batch)
            eps = rng.standard_normal((batch,) + x_data.shape[1:])
            xt = add_noise(x_data[idx], eps, t, schedule)
            pred = eps_fn(xt, t, c_data[idx])
            losses.append(float(np.mean((pred.astype(np.float64) - eps) ** 2)))
    return float(np.mean(losses))
