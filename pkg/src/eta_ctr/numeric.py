"""Dense linear-algebra kernels with hand-derived backward passes.

Everything here works on float64 numpy arrays.  A "matrix" is a 2-D array;
batched helpers accept leading batch axes where noted.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``a @ b`` w.r.t. ``a`` and ``b`` given upstream ``dout``."""
    return dout @ b.T, a.T @ dout


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, stabilised by max subtraction."""
    x = np.asarray(x, dtype=DTYPE)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    x = np.where(mask, x, -np.inf)
    mx = x.max(axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    z = np.where(mask, np.exp(x - mx), 0.0)
    s = z.sum(axis=-1, keepdims=True)
    return z / np.where(s > 0, s, 1.0)


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    # p * (dp - <p, dp>); zero wherever p is zero, so masked slots stay at 0
    return p * (dp - (p * dp).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dout, 0.0)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    return x @ w + b


def linear_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dw, db) for ``x @ w + b``."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def zeros_like_params(params: Mapping[str, np.ndarray]) -> Params:
    return {name: np.zeros_like(value) for name, value in params.items()}


def central_difference(
    f: Callable[[Params], float], params: Params, name: str, index: tuple[int, ...], eps: float
) -> float:
    arr = params[name]
    orig = arr[index]
    arr[index] = orig + eps
    hi = f(params)
    arr[index] = orig - eps
    lo = f(params)
    arr[index] = orig
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NumericError(f"non-finite objective while perturbing {name}{list(index)}")
    return (hi - lo) / (2.0 * eps)


def backward_check(
    f: Callable[[Params], tuple[float, Params]],
    params: Params,
    eps: float = 1e-4,
    names: list[str] | None = None,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a parameter dict to ``(value, grads)``.  The error for each
    entry is ``|analytic - numeric| / max(1, |numeric|)``.  ``max_entries``
    subsamples entries per parameter (with ``rng``) for large tensors.
    ``params`` is perturbed in place and restored.
    """
    value, grads = f(params)
    if not np.isfinite(value):
        raise NumericError("objective is not finite at the base point")

    def scalar(p: Params) -> float:
        return float(f(p)[0])

    worst = 0.0
    for name in names if names is not None else list(params):
        arr = params[name]
        flat = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat = (rng or np.random.default_rng(0)).choice(arr.size, size=max_entries, replace=False)
        for i in flat:
            idx = np.unravel_index(int(i), arr.shape)
            numeric = central_difference(scalar, params, name, idx, eps)
            analytic = float(grads[name][idx])
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
