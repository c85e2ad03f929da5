"""AdamW with decoupled weight decay over a named parameter dict."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or Inf; the step was not applied."""


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> AdamState:
    """Update ``params`` in place for every name present in ``grads``.

    The whole step is rejected (nothing is modified) if any gradient is non-finite.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteGradientError(f"non-finite gradient in {name!r} ({bad} entries); step rejected")

    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        m = beta1 * m + (1.0 - beta1) * g64
        v = beta2 * v + (1.0 - beta2) * g64 * g64
        state.m[name], state.v[name] = m, v
        upd = p.astype(np.float64)
        upd *= 1.0 - lr * weight_decay
        upd -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p[...] = upd
    return state
