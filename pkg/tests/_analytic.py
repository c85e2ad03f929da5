"""One-dimensional Gaussian data, where the optimal noise predictor and the ODE flow are closed form."""

import numpy as np

from latentdit.diffusion import NoiseSchedule
from latentdit.samplers import SamplerConfig, integrate

SCHEDULE = NoiseSchedule()
MEAN, STD = 0.0, 0.5
STEP_COUNTS = (10, 20, 40, 80)


def gaussian_eps(x, t, cond=None):
    t = np.reshape(t, np.shape(t) + (1,) * (np.ndim(x) - np.ndim(t)))
    a, s = SCHEDULE.alpha(t), SCHEDULE.sigma(t)
    return s * (x - a * MEAN) / (a * a * STD ** 2 + s * s)


def exact_flow(x_T, t):
    """Probability-flow ODE solution from t=T to t: an affine map for Gaussian data."""
    a, s = SCHEDULE.alpha(t), SCHEDULE.sigma(t)
    aT, sT = SCHEDULE.alpha(float(SCHEDULE.T)), SCHEDULE.sigma(float(SCHEDULE.T))
    return a * MEAN + np.sqrt(a * a * STD ** 2 + s * s) / np.sqrt(aT * aT * STD ** 2 + sT * sT) * (x_T - aT * MEAN)


START = np.linspace(-2.0, 2.0, 9)[:, None]


def terminal_error(kind, steps):
    x = integrate(gaussian_eps, START, None, SamplerConfig(kind=kind, steps=steps), SCHEDULE, final_denoise=False)
    return float(np.max(np.abs(x - exact_flow(START, 1.0))))


def convergence_slope(kind, counts=STEP_COUNTS):
    errs = [terminal_error(kind, n) for n in counts]
    return -np.polyfit(np.log(counts), np.log(errs), 1)[0], errs
