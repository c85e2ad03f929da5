"""Differentiable operations.

Broadcasting is deliberately narrow: a binary op accepts equal shapes, a
trailing-suffix operand (per-feature bias/affine), or a same-rank operand
whose mismatched axes are singletons (leading-batch modulation). Anything
else raises ``ShapeError``.

Matrix products and reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor

_GELU_C = math.sqrt(2.0 / math.pi)


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _small_fits(big: tuple, small: tuple) -> bool:
    if small == big:
        return True
    if len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small):
        return True
    if len(small) == len(big) and all(s == b or s == 1 for s, b in zip(small, big)):
        return True
    return False


def _result_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if _small_fits(a, b):
        return a
    if _small_fits(b, a):
        return b
    raise ShapeError(f"incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.astype(np.result_type(grad.dtype, np.float32), copy=False).reshape(shape)


def _cast(arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    return arr.astype(like.dtype, copy=False)


# elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    _result_shape(a.shape, b.shape)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_cast(_unbroadcast(g, sa), g), _cast(_unbroadcast(g, sb), g))

    return Tensor._result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    _result_shape(a.shape, b.shape)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_cast(_unbroadcast(g, sa), g), _cast(-_unbroadcast(g, sb), g))

    return Tensor._result(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _const(a, b)
    b = _const(b, a)
    _result_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return (None if ga is None else _cast(ga, g), None if gb is None else _cast(gb, g))

    return Tensor._result(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


# elementwise unary --------------------------------------------------------

def square(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(x * x, (a,), lambda g: (2.0 * x * g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._result(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = 1.0 / (1.0 + np.exp(-x))
    y = x * s

    def backward(g):
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return Tensor._result(y.astype(x.dtype, copy=False), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return Tensor._result(y, (a,), backward)


# shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if not _small_fits(shape, a.shape):
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}")
    src = a.shape
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return Tensor._result(out, (a,), lambda g: (_cast(_unbroadcast(g, src), g),))


def getitem(a: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(a.data[idx])
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)

    return Tensor._result(out, (a,), backward)


def _is_advanced(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        res = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            res.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(res)

    return Tensor._result(out, tensors, backward)


# reductions ----------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = a.data
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.ascontiguousarray(np.broadcast_to(g, x.shape)),)

    return Tensor._result(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# linear algebra ---------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Product over the last two axes; leading axes must agree (or ``b`` is 2-D)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad.astype(np.float64), bd.astype(np.float64)).astype(ad.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g64, np.swapaxes(bd, -1, -2).astype(np.float64)).astype(ad.dtype)
        if b.requires_grad:
            if bd.ndim == 2:
                a2 = ad.reshape(-1, ad.shape[-1]).astype(np.float64)
                gb = (a2.T @ g64.reshape(-1, g.shape[-1])).astype(bd.dtype)
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2).astype(np.float64), g64).astype(bd.dtype)
        return (ga, gb)

    return Tensor._result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    x2 = xd.reshape(-1, xd.shape[-1]).astype(np.float64)
    out = x2 @ wd.T.astype(np.float64)
    if bias is not None:
        out += bias.data
    out = out.astype(xd.dtype).reshape(xd.shape[:-1] + (wd.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1]).astype(np.float64)
        gx = (g2 @ wd.astype(np.float64)).astype(xd.dtype).reshape(xd.shape) if x.requires_grad else None
        gw = (g2.T @ x2).astype(wd.dtype) if weight.requires_grad else None
        if bias is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0).astype(wd.dtype))

    return Tensor._result(out, parents, backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (y * (g - dot),)

    return Tensor._result(y, (a,), backward)


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply the optional per-feature affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    xd = x.data
    d = xd.shape[-1]
    x64 = xd.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    out = out.astype(xd.dtype)
    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def backward(g):
        g64 = g.astype(np.float64)
        res = []
        gh = g64 * gamma.data if gamma is not None else g64
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res.append(gx.astype(xd.dtype))
        if gamma is not None:
            res.append((g64 * xhat).reshape(-1, d).sum(axis=0).astype(xd.dtype))
        if beta is not None:
            res.append(g64.reshape(-1, d).sum(axis=0).astype(xd.dtype))
        return tuple(res)

    return Tensor._result(out, parents, backward)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """adaLN modulation: ``x * (1 + scale) + shift`` with (B, D) conditioning over (B, N, D) tokens."""
    if x.ndim != 3 or shift.shape != (x.shape[0], x.shape[2]) or scale.shape != shift.shape:
        raise ShapeError(f"modulate: tokens {x.shape} vs shift {shift.shape} / scale {scale.shape}")
    xd = x.data
    sc = scale.data[:, None, :]
    out = xd * (1.0 + sc) + shift.data[:, None, :]

    def backward(g):
        gx = g * (1.0 + sc)
        gshift = g.sum(axis=1, dtype=np.float64).astype(g.dtype)
        gscale = (g * xd).sum(axis=1, dtype=np.float64).astype(g.dtype)
        return (gx, gshift, gscale)

    return Tensor._result(out, (x, shift, scale), backward)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q kᵀ · scale) v over the last two axes (per head for 4-D inputs)."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query {q.shape} and key {k.shape} head dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: key {k.shape} and value {v.shape} lengths differ")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise ShapeError(f"attention: batch dims differ {q.shape} {k.shape} {v.shape}")
    qd, kd, vd = (t.data.astype(np.float64) for t in (q, k, v))
    s = np.matmul(qd, np.swapaxes(kd, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, vd).astype(q.data.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        gv = np.matmul(np.swapaxes(p, -1, -2), g64)
        gp = np.matmul(g64, np.swapaxes(vd, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, kd)
        gk = np.matmul(np.swapaxes(gs, -1, -2), qd)
        dt = q.data.dtype
        return (gq.astype(dt), gk.astype(dt), gv.astype(dt))

    return Tensor._result(out, (q, k, v), backward)


# losses -----------------------------------------------------------------------

def mse(pred: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data.astype(np.float64) - t
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=pred.data.dtype)

    def backward(g):
        return (((2.0 / n) * diff * float(g)).astype(pred.data.dtype),)

    return Tensor._result(out, (pred,), backward)
