"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d array for each input, by central differences on the scalar output."""
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    grads = []
    for i, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            hi = fn(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig - h
            lo = fn(*[Tensor(a) for a in arrays]).item()
            flat[j] = orig
            gflat[j] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def tape_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    inputs = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*inputs))
    return [t.grad.copy() for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def max_gradient_error(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients over all inputs."""
    analytic = tape_gradients(fn, arrays)
    numeric = numerical_gradients(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
