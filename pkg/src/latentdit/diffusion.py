"""Noise schedule, forward noising, epsilon-prediction loss and guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F


@dataclass(frozen=True)
class ScheduleConfig:
    type: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    T: int = 1000

    def to_dict(self) -> dict:
        return asdict(self)


class NoiseSchedule:
    """Discrete DDPM schedule with a continuous-time extension.

    ``alpha_bar`` at fractional t interpolates log(alpha_bar) linearly between
    integer knots (knot 0 has alpha_bar = 1), which makes ``t_from_lambda`` an
    exact inverse of ``lambda_``.
    """

    def __init__(self, cfg: ScheduleConfig = ScheduleConfig()):
        if cfg.type != "linear":
            raise ValueError(f"unknown schedule type {cfg.type!r}")
        self.cfg = cfg
        self.T = cfg.T
        self.betas = np.linspace(cfg.beta_min, cfg.beta_max, cfg.T, dtype=np.float64)
        self.log_alpha_bar = np.concatenate([[0.0], np.cumsum(np.log1p(-self.betas))])
        self.alpha_bar = np.exp(self.log_alpha_bar)  # index t, t = 0..T

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]: {t}")
        return t

    def log_alpha_bar_at(self, t) -> np.ndarray:
        t = self._check(t)
        return np.interp(t, np.arange(self.T + 1, dtype=np.float64), self.log_alpha_bar)

    def alpha(self, t) -> np.ndarray:
        """sqrt(alpha_bar_t): the signal coefficient."""
        return np.exp(0.5 * self.log_alpha_bar_at(t))

    def sigma(self, t) -> np.ndarray:
        return np.sqrt(-np.expm1(self.log_alpha_bar_at(t)))

    def lambda_(self, t) -> np.ndarray:
        """Half log-SNR: log(alpha_t / sigma_t)."""
        la = self.log_alpha_bar_at(t)
        return 0.5 * (la - np.log(-np.expm1(la)))

    def t_from_lambda(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=np.float64)
        log_ab = -np.logaddexp(0.0, -2.0 * lam)  # log sigmoid(2 lambda)
        # log_alpha_bar is decreasing in t; np.interp needs increasing x
        return np.interp(log_ab, self.log_alpha_bar[::-1], np.arange(self.T, -1, -1, dtype=np.float64))

    @staticmethod
    def alpha_sigma_from_lambda(lam):
        lam = np.asarray(lam, dtype=np.float64)
        return np.sqrt(1.0 / (1.0 + np.exp(-2.0 * lam))), np.sqrt(1.0 / (1.0 + np.exp(2.0 * lam)))


def add_noise(x0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t per batch element (leading axis)."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} differs from data shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep must lie in [1, {schedule.T}], got {t}")
    a = schedule.alpha(t)
    s = schedule.sigma(t)
    if a.ndim:
        expand = (slice(None),) + (None,) * (x0.ndim - 1)
        a, s = a[expand], s[expand]
    return (a * x0 + s * eps).astype(x0.dtype)


def epsilon_loss(predict: Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], Tensor],
                 x0: np.ndarray, cond, t: np.ndarray, eps: np.ndarray,
                 schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between predicted and true noise.

    Raises FloatingPointError naming the first batch element whose loss is not finite.
    """
    xt = add_noise(x0, eps, t, schedule)
    pred = predict(xt, t, cond)
    diff = pred.data.astype(np.float64) - eps
    per_example = (diff * diff).reshape(diff.shape[0], -1).mean(axis=1)
    bad = np.flatnonzero(~np.isfinite(per_example))
    if bad.size:
        raise FloatingPointError(f"non-finite epsilon loss at batch index {int(bad[0])}")
    return F.mse(pred, eps.astype(pred.data.dtype))


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance eps_u + w (eps_c - eps_u).

    Evaluated as (1 - w) eps_u + w eps_c, which is exact at w = 0 and w = 1.
    """
    if np.shape(eps_uncond) != np.shape(eps_cond):
        raise ValueError(f"guidance shapes differ: {np.shape(eps_uncond)} vs {np.shape(eps_cond)}")
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    return (1.0 - w) * eps_uncond + w * eps_cond
