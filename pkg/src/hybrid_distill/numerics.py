"""Dense f64 kernels with hand-written backward passes and a finite-difference checker.

Arrays are plain ``numpy.ndarray`` in float64, row-major. Every kernel rejects
non-finite inputs so numeric blow-ups surface at the op that received them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


@dataclass
class DualTensor:
    """A value paired with an accumulator for dLoss/dvalue."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


# --- matmul -----------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a, b, g) -> tuple[np.ndarray, np.ndarray]:
    """Return (dA, dB) = (G Bᵀ, Aᵀ G)."""
    a, b, g = as_tensor(a), as_tensor(b), as_tensor(g)
    if g.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(f"upstream grad {g.shape} does not match output {(a.shape[0], b.shape[1])}")
    return g @ b.T, a.T @ g


# --- softmax ----------------------------------------------------------------


def softmax_rows(x, mask=None) -> np.ndarray:
    """Row softmax. ``mask`` is True where an entry participates; masked entries come out exactly 0."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} != input shape {x.shape}")
    if not np.all(mask.any(axis=1)):
        raise DegenerateRowError("softmax row with every entry masked")
    z = np.where(mask, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, g) -> np.ndarray:
    """Gradient wrt the logits given the softmax output ``y`` and upstream ``g``."""
    y, g = as_tensor(y), as_tensor(g)
    return y * (g - (g * y).sum(axis=1, keepdims=True))


# --- layer statistics -------------------------------------------------------


def layernorm_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased (ddof=1) standard deviation over the last axis."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("std with divisor d-1 needs at least 2 features")
    mean = x.mean(axis=-1)
    std = np.sqrt(((x - mean[..., None]) ** 2).sum(axis=-1) / (d - 1))
    return mean, std


def layernorm_stats_backward(x, g_mean, g_std) -> np.ndarray:
    x = as_tensor(x)
    d = x.shape[-1]
    mean, std = layernorm_stats(x)
    centered = x - mean[..., None]
    safe = np.where(std > 0, std, 1.0)
    d_std = np.where(std[..., None] > 0, centered / ((d - 1) * safe[..., None]), 0.0)
    return g_mean[..., None] / d + g_std[..., None] * d_std


# --- finite differences -----------------------------------------------------


def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], theta, eps: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps a parameter array to ``(value, grad)``.
    """
    theta = as_tensor(theta).copy()
    value, analytic = f(theta)
    if not np.isfinite(value):
        raise NonFiniteError("objective is not finite at theta")
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.zeros_like(theta)
    flat, num_flat = theta.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta)[0]
        flat[i] = orig - eps
        fm = f(theta)[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective not finite around coordinate {i}")
        num_flat[i] = (fp - fm) / (2 * eps)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def grad_check_torch(loss_fn, params, eps: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> float:
    """:func:`grad_check` for torch parameters: autograd against central differences.

    ``loss_fn()`` recomputes the scalar loss from the current parameter values.
    With ``max_coords`` only a seeded random subset of coordinates is probed per tensor.
    """
    import torch

    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            coords = np.arange(flat.numel())
            if max_coords is not None and coords.size > max_coords:
                coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = loss_fn().item()
                flat[i] = orig - eps
                fm = loss_fn().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = gflat[i].item()
                worst = max(worst, abs(ana - num) / (abs(ana) + abs(num) + 1e-12))
    return worst
