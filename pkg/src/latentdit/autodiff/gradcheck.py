"""Central finite-difference checks for the tape engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``.

    The floor keeps gradients that vanish identically (e.g. a key bias under
    softmax shift invariance) from comparing roundoff against roundoff.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def numerical_gradient(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], index: int,
                       h: float = 1e-3, weights: np.ndarray | None = None) -> np.ndarray:
    """Entry-wise central differences of ``sum(weights * f(*inputs))`` w.r.t. ``inputs[index]``."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    x = base[index]
    grad = np.zeros_like(x)

    def scalar():
        with precision(np.float64):
            out = f(*[Tensor(b) for b in base]).data
        return float(np.sum(out if weights is None else out * weights))

    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = scalar()
        x[i] = orig - h
        fm = scalar()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              seed: int = 0) -> list[float]:
    """Compare reverse-mode gradients with central differences for every input.

    The output is scalarised with fixed random weights so that non-scalar ops
    are checked along a generic direction. Returns one relative error per input.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        out = f(*ts)
        weights = rng.uniform(-1.0, 1.0, size=out.shape)
        out.backward(weights)
    errors = []
    for i, t in enumerate(ts):
        num = numerical_gradient(f, inputs, i, h=h, weights=weights)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        errors.append(relative_error(ana, num))
    return errors
