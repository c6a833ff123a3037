"""Dense matrix kernels, residual FC layers, SGD and a finite-difference checker.

Every matrix is a 2-D ``float64`` numpy array. Public operations refuse to
return non-finite values: a NaN or Inf raises :class:`NonFiniteError`
instead of propagating silently.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in the output of a numeric operation."""


def _finite(x: np.ndarray, name: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} contains NaN or Inf")
    return x


def as_matrix(x, name: str = "x") -> np.ndarray:
    """Coerce ``x`` to a finite 2-D float64 array (1-D input becomes one row)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return _finite(arr, name)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    return _finite(out)


def transpose(x) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(x).T)


def concat_columns(blocks: Sequence) -> np.ndarray:
    mats = [as_matrix(b) for b in blocks]
    if len({m.shape[0] for m in mats}) != 1:
        raise ValueError("concat_columns needs equal row counts")
    return np.concatenate(mats, axis=1)


def concat_rows(blocks: Sequence) -> np.ndarray:
    mats = [as_matrix(b) for b in blocks]
    if len({m.shape[1] for m in mats}) != 1:
        raise ValueError("concat_rows needs equal column counts")
    return np.concatenate(mats, axis=0)


def scalar_scale_add(scale: float, x, y) -> np.ndarray:
    """Return ``scale * x + y``."""
    x = as_matrix(x, "x")
    y = as_matrix(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return _finite(scale * x + y)


def row_softmax(x) -> np.ndarray:
    x = as_matrix(x)
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def masked_row_softmax(x, mask) -> np.ndarray:
    """Softmax over the entries where ``mask`` is set; masked entries are 0.

    A row with no surviving entry falls back to the uniform distribution
    over all its columns.
    """
    x = as_matrix(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ValueError(f"mask shape {mask.shape} != input shape {x.shape}")
    masked = np.where(mask, x, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    empty = ~mask.any(axis=1)
    row_max[empty] = 0.0
    z = np.where(mask, np.exp(masked - row_max), 0.0)
    total = z.sum(axis=1, keepdims=True)
    total[empty] = 1.0
    out = z / total
    out[empty] = 1.0 / x.shape[1]
    return out


def soft_threshold(x, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    x = as_matrix(x)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def grid_max_pool(grid, kernel: int) -> np.ndarray:
    """Max-pool an ``(h, w, c)`` grid with stride equal to ``kernel``.

    Trailing rows/columns that do not fill a whole window are dropped.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ValueError(f"grid must be (h, w, c), got {grid.shape}")
    if kernel < 1:
        raise ValueError("kernel must be positive")
    h, w, c = grid.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise ValueError(f"grid {h}x{w} too small for kernel {kernel}")
    cropped = grid[: ho * kernel, : wo * kernel]
    return _finite(cropped.reshape(ho, kernel, wo, kernel, c).max(axis=(1, 3)))


def global_average_pool(x) -> np.ndarray:
    """Column means of a matrix as a ``1 x cols`` row."""
    return as_matrix(x).mean(axis=0, keepdims=True)


@dataclass
class LinearMap:
    """Fully-connected layer ``y = x W + b``, with ``+ x`` when residual."""

    weight: np.ndarray
    bias: np.ndarray
    residual: bool = False

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.bias.shape[0] != self.out_dim:
            raise ValueError("bias length must equal out_dim")
        if self.residual and self.in_dim != self.out_dim:
            raise ValueError("residual layers need in_dim == out_dim")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator,
             residual: Optional[bool] = None, zero: bool = False) -> "LinearMap":
        if residual is None:
            residual = in_dim == out_dim
        if zero:
            weight = np.zeros((in_dim, out_dim))
        else:
            bound = 1.0 / np.sqrt(in_dim)
            weight = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        return cls(weight, np.zeros(out_dim), residual)

    def copy(self) -> "LinearMap":
        return LinearMap(self.weight.copy(), self.bias.copy(), self.residual)


def linear_forward(layer: LinearMap, x) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.in_dim:
        raise ValueError(f"input has {x.shape[1]} columns, layer expects {layer.in_dim}")
    y = x @ layer.weight + layer.bias
    if layer.residual:
        y = y + x
    return _finite(y)


def linear_backward(layer: LinearMap, x, upstream):
    """Return ``(grad_x, grad_weight, grad_bias)`` for :func:`linear_forward`."""
    x = as_matrix(x)
    upstream = as_matrix(upstream, "upstream")
    if x.shape[1] != layer.in_dim or upstream.shape != (x.shape[0], layer.out_dim):
        raise ValueError("shapes inconsistent with forward pass")
    grad_x = upstream @ layer.weight.T
    if layer.residual:
        grad_x = grad_x + upstream
    return _finite(grad_x), _finite(x.T @ upstream), upstream.sum(axis=0)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, epsilon: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, same shape as ``theta``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        hi = float(f(theta))
        flat[i] = orig - epsilon
        lo = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        g[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Block relative error ``max|a - n| / max(max|a|, max|n|)``.

    Scaling by the block's largest entry keeps roundoff on near-zero entries
    from dominating the measure; ``floor`` bounds the scale from below for
    blocks whose true gradient vanishes.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    return float(np.max(np.abs(a - n))) / scale


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: SgdState,
             decay_mask: Optional[Dict[str, bool]] = None) -> None:
    """In-place momentum SGD on every entry of ``params`` that has a gradient.

    Weight decay is folded into the gradient (``g + wd * p``) before the
    momentum buffer update ``v = mu * v + g``; then ``p -= lr * v``.
    """
    for name, grad in grads.items():
        p = params[name]
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {grad.shape}, param {p.shape}")
        _finite(grad, f"gradient {name!r}")
        if state.weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            grad = grad + state.weight_decay * p
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
        elif buf.shape != p.shape:
            raise ValueError(f"momentum buffer for {name!r} has stale shape {buf.shape}")
        buf = state.momentum * buf + grad
        state.buffers[name] = buf
        p -= state.learning_rate * buf
