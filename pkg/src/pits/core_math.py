"""Dense float64 kernels with hand-written backward passes.

Every primitive operates on the last axis of an ``ndarray`` so the same code
serves single patches, patch grids (B, C, N, P) and flattened heads.
"""

from __future__ import annotations

import zlib
from typing import Callable, Mapping

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class RngState:
    """Root seed plus labeled Philox sub-streams.

    ``stream("dropout", step)`` always yields the same generator for the same
    (seed, label, counters) and never depends on which other streams were used.
    """

    algorithm = "philox4x64"

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, label: str, *counters: int) -> np.random.Generator:
        key = (zlib.crc32(label.encode()),) + tuple(int(c) for c in counters)
        ss = np.random.SeedSequence(self.seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, algorithm={self.algorithm!r})"


def check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {name}")


# ---------------------------------------------------------------- linear


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(
            f"linear: x{tuple(x.shape)} @ W{tuple(W.shape)} + b{tuple(b.shape)}"
        )
    return x @ W + b


def linear_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Returns (dx, dW, db); leading axes of x/dy are summed for dW, db."""
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- relu


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, dy, 0.0)


# ---------------------------------------------------------------- dropout


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout. Returns (y, mask); mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng stream")
    mask = (rng.random(x.shape) >= rate).astype(DTYPE) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(mask: np.ndarray | None, dy: np.ndarray) -> np.ndarray:
    return dy if mask is None else dy * mask


# ---------------------------------------------------------------- max-pool


def maxpool_adjacent(z: np.ndarray, axis: int = -2):
    """Max over adjacent pairs (0,1), (2,3), ... along ``axis``.

    An odd trailing element is dropped. Returns (pooled, pick) where ``pick``
    is 0 where the earlier element won (ties included) and 1 otherwise.
    """
    n = z.shape[axis]
    if n < 2:
        raise ShapeError(f"maxpool_adjacent needs at least 2 rows, got {n}")
    half = n // 2
    z = np.moveaxis(z, axis, -1)
    a = z[..., 0 : 2 * half : 2]
    b = z[..., 1 : 2 * half : 2]
    pick = (b > a).astype(np.int8)
    out = np.where(pick == 1, b, a)
    return np.moveaxis(out, -1, axis), np.moveaxis(pick, -1, axis)


def maxpool_adjacent_backward(pick: np.ndarray, dy: np.ndarray, n: int, axis: int = -2):
    pick = np.moveaxis(pick, axis, -1)
    dy = np.moveaxis(dy, axis, -1)
    dz = np.zeros(dy.shape[:-1] + (n,), dtype=DTYPE)
    half = dy.shape[-1]
    dz[..., 0 : 2 * half : 2] = np.where(pick == 0, dy, 0.0)
    dz[..., 1 : 2 * half : 2] = np.where(pick == 1, dy, 0.0)
    return np.moveaxis(dz, -1, axis)


# ---------------------------------------------------------------- softmax helpers


def logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------- gradient oracle


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Central-difference check of ``grads`` against ``loss_fn``.

    ``loss_fn`` reads ``params`` in place; every coordinate is nudged by
    +-eps and restored. Returns the max relative error per parameter name.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must be in [1e-5, 1e-2], got {eps}")
    f0 = loss_fn()
    if loss_fn() != f0:
        raise RuntimeError("loss_fn is not deterministic; freeze masks and dropout")

    report = {}
    for name, theta in params.items():
        g = grads[name]
        num = np.zeros_like(theta)
        flat = theta.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            fp = loss_fn()
            flat[i] = old - eps
            fm = loss_fn()
            flat[i] = old
            num.reshape(-1)[i] = (fp - fm) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        report[name] = float(np.max(np.abs(g - num) / denom)) if g.size else 0.0
    return report
