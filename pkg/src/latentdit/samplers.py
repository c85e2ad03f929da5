"""Reverse-process samplers: ancestral DDPM, DDIM and second-order DPM-Solver.

All samplers share one time grid convention: ``steps`` grid points from t=T
down to t=1 (uniform in t for ddpm/ddim, uniform in log-SNR for dpm2), then a
final denoising step from t=1 to t=0 using the predicted clean sample.

``eps_fn(x, t, cond)`` returns predicted noise; ``cond=None`` requests the
unconditional branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .diffusion import NoiseSchedule, cfg_combine

EpsFn = Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]

KINDS = ("ddpm", "ddim", "dpm2")


class SamplerError(FloatingPointError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "dpm2"
    steps: int = 50
    guidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; choose from {KINDS}")
        if self.steps < 1 or (self.kind == "dpm2" and self.steps < 2):
            raise ValueError(f"{self.kind} needs at least {2 if self.kind == 'dpm2' else 1} steps")
        if self.guidance < 0:
            raise ValueError("guidance scale must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def noise_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, step)."""
    key = np.random.SeedSequence([seed, stream, step]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


INIT_STREAM = 0
STEP_STREAM = 1


def initial_noise(shape: Sequence[int], seed: int) -> np.ndarray:
    return noise_rng(seed, INIT_STREAM, 0).standard_normal(tuple(shape))


def guided_eps(eps_fn: EpsFn, x: np.ndarray, t: float, cond, w: float) -> np.ndarray:
    tt = np.full(x.shape[0], t, dtype=np.float64)
    e_c = np.asarray(eps_fn(x, tt, cond), dtype=np.float64)
    e_u = np.asarray(eps_fn(x, tt, None), dtype=np.float64)
    return cfg_combine(e_u, e_c, w)


def time_grid(schedule: NoiseSchedule, kind: str, steps: int) -> np.ndarray:
    T = schedule.T
    if kind == "dpm2":
        lam = np.linspace(schedule.lambda_(T), schedule.lambda_(1.0), steps)
        ts = schedule.t_from_lambda(lam)
        ts[0], ts[-1] = float(T), 1.0
        return ts
    return np.linspace(float(T), 1.0, steps)


def ddim_step(x, t_hi, t_lo, eps, schedule: NoiseSchedule):
    a_hi, s_hi = schedule.alpha(t_hi), schedule.sigma(t_hi)
    a_lo, s_lo = schedule.alpha(t_lo), schedule.sigma(t_lo)
    x0 = (x - s_hi * eps) / a_hi
    return a_lo * x0 + s_lo * eps


def dpm2_step(x: np.ndarray, t_hi: float, t_lo: float, eps_at: Callable[[np.ndarray, float], np.ndarray],
              schedule: NoiseSchedule) -> np.ndarray:
    """Second-order exponential-integrator step from ``t_hi`` to ``t_lo`` (midpoint in log-SNR)."""
    lam_hi, lam_lo = float(schedule.lambda_(t_hi)), float(schedule.lambda_(t_lo))
    h = lam_lo - lam_hi
    if not h > 0:
        raise ValueError(f"degenerate dpm2 interval: lambda({t_lo}) must exceed lambda({t_hi})")
    lam_mid = lam_hi + 0.5 * h
    t_mid = float(schedule.t_from_lambda(lam_mid))
    a_hi, _ = NoiseSchedule.alpha_sigma_from_lambda(lam_hi)
    a_mid, s_mid = NoiseSchedule.alpha_sigma_from_lambda(lam_mid)
    a_lo, s_lo = NoiseSchedule.alpha_sigma_from_lambda(lam_lo)
    e1 = eps_at(x, t_hi)
    u = (a_mid / a_hi) * x - s_mid * np.expm1(0.5 * h) * e1
    e2 = eps_at(u, t_mid)
    return (a_lo / a_hi) * x - s_lo * np.expm1(h) * e2


def lambda_midpoint_t(schedule: NoiseSchedule, t_hi: float, t_lo: float) -> float:
    lam = 0.5 * (schedule.lambda_(t_hi) + schedule.lambda_(t_lo))
    return float(schedule.t_from_lambda(lam))


def integrate(eps_fn: EpsFn, x: np.ndarray, cond, cfg: SamplerConfig, schedule: NoiseSchedule,
              final_denoise: bool = True) -> np.ndarray:
    """Run the reverse process from ``x`` at t=T; returns float64 state at t=0 (or t=1)."""
    x = np.asarray(x, dtype=np.float64)
    ts = time_grid(schedule, cfg.kind, cfg.steps)
    w = cfg.guidance

    def eps_at(z, t):
        return guided_eps(eps_fn, z, t, cond, w)

    for i in range(len(ts) - 1):
        t_hi, t_lo = float(ts[i]), float(ts[i + 1])
        if cfg.kind == "dpm2":
            x = dpm2_step(x, t_hi, t_lo, eps_at, schedule)
        else:
            eps = eps_at(x, t_hi)
            if cfg.kind == "ddim":
                x = ddim_step(x, t_hi, t_lo, eps, schedule)
            else:
                x = _ancestral_step(x, t_hi, t_lo, eps, schedule, noise_rng(cfg.seed, STEP_STREAM, i + 1))
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite sampler state at step {i + 1}")
    if final_denoise:
        t1 = float(ts[-1])
        eps = eps_at(x, t1)
        x = (x - schedule.sigma(t1) * eps) / schedule.alpha(t1)
        if not np.all(np.isfinite(x)):
            raise SamplerError(f"non-finite sampler state at step {len(ts)}")
    return x


def _ancestral_step(x, t_hi, t_lo, eps, schedule: NoiseSchedule, rng: np.random.Generator):
    ab_hi = float(np.exp(schedule.log_alpha_bar_at(t_hi)))
    ab_lo = float(np.exp(schedule.log_alpha_bar_at(t_lo)))
    x0 = (x - np.sqrt(1 - ab_hi) * eps) / np.sqrt(ab_hi)
    beta = 1.0 - ab_hi / ab_lo
    mean = (np.sqrt(ab_lo) * beta / (1 - ab_hi)) * x0 + (np.sqrt(ab_hi / ab_lo) * (1 - ab_lo) / (1 - ab_hi)) * x
    var = (1 - ab_lo) / (1 - ab_hi) * beta
    return mean + np.sqrt(var) * rng.standard_normal(x.shape)


def sample(eps_fn: EpsFn, cond, shape: Sequence[int], cfg: SamplerConfig,
           schedule: Optional[NoiseSchedule] = None) -> np.ndarray:
    """Draw latents of ``shape`` from noise seeded by ``cfg.seed``."""
    schedule = schedule or NoiseSchedule()
    x = initial_noise(shape, cfg.seed)
    return integrate(eps_fn, x, cond, cfg, schedule).astype(np.float32)


# guidance grid search ------------------------------------------------------------

def select_guidance(table: Dict[float, float]) -> float:
    """Argmin of a w -> metric table; ties go to the smaller w."""
    if not table:
        raise ValueError("empty guidance table")
    return min(sorted(table), key=lambda w: table[w])


def guidance_sweep(generate: Callable[[float], object], metric: Callable[[object], float],
                   ws: Sequence[float]) -> Tuple[Dict[float, float], float]:
    """Score samples generated at each guidance scale; returns (table, best w).

    ``generate(w)`` must use shared seeds across w so that the sweep is variance-controlled.
    """
    if not ws:
        raise ValueError("guidance sweep needs at least one w")
    table: Dict[float, float] = {}
    for w in ws:
        try:
            table[float(w)] = float(metric(generate(float(w))))
        except Exception as exc:  # annotate and re-raise
            raise RuntimeError(f"guidance sweep failed at w={w}: {exc}") from exc
    return table, select_guidance(table)


def sweep_rows(table: Dict[float, float]) -> List[dict]:
    return [{"w": w, "metric": table[w]} for w in sorted(table)]
