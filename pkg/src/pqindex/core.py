"""Scalar numeric primitives: distances, cosine, Adagrad, seeded RNG fan-out."""

from __future__ import annotations

import zlib

import numpy as np

from .errors import DegenerateInput, DimensionMismatch

EPS = 1e-8


def l2_sq(x, y) -> float:
    """Squared euclidean distance, accumulated in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"l2_sq: shapes {x.shape} vs {y.shape}")
    d = x - y
    return float(np.dot(d, d))


def cosine(x, y) -> float:
    """Cosine similarity. Rejects zero-norm operands."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"cosine: shapes {x.shape} vs {y.shape}")
    nx = float(np.dot(x, x))
    ny = float(np.dot(y, y))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateInput("cosine of zero-norm vector")
    return float(np.dot(x, y) / np.sqrt(nx * ny))


def unit(x) -> np.ndarray:
    """x / ||x|| as float64. Rejects the zero vector."""
    x = np.asarray(x, dtype=np.float64)
    n = float(np.dot(x, x))
    if n == 0.0:
        raise DegenerateInput("cannot normalize zero-norm vector")
    return x / np.sqrt(n)


def adagrad_step(param, grad, acc, lr: float = 0.01, eps: float = EPS):
    """One Adagrad update. Returns (new_param, new_acc); elementwise on arrays."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    new_acc = acc + grad * grad
    new_param = param - lr * grad / np.sqrt(new_acc + eps)
    return new_param, new_acc


class Adagrad:
    """Adagrad state for one parameter array.

    The accumulator is float64 (a running sum of squares); the parameter it
    updates stays in its own dtype.
    """

    def __init__(self, shape, lr: float = 0.01, eps: float = EPS):
        self.lr = float(lr)
        self.eps = float(eps)
        self.acc = np.zeros(shape, dtype=np.float64)

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        """Dense in-place update of the full array."""
        g = np.asarray(grad, dtype=np.float64)
        self.acc += g * g
        param -= (self.lr * g / np.sqrt(self.acc + self.eps)).astype(param.dtype)

    def step_rows(self, param: np.ndarray, grad_rows: np.ndarray, rows: np.ndarray) -> None:
        """Sparse row update. Duplicate row ids have their gradients summed first."""
        uniq, inv = np.unique(rows, return_inverse=True)
        g = np.zeros((uniq.size,) + param.shape[1:], dtype=np.float64)
        np.add.at(g, inv, np.asarray(grad_rows, dtype=np.float64))
        acc_rows = self.acc[uniq] + g * g
        self.acc[uniq] = acc_rows
        param[uniq] -= (self.lr * g / np.sqrt(acc_rows + self.eps)).astype(param.dtype)

    def clone(self) -> "Adagrad":
        other = Adagrad(self.acc.shape, lr=self.lr, eps=self.eps)
        other.acc = self.acc.copy()
        return other


def subrng(root_seed: int, label: str) -> np.random.Generator:
    """Derive a module-local RNG from the run's root seed and a fixed label.

    Streams for different labels are independent; adding a new label never
    shifts existing ones.
    """
    return np.random.default_rng([int(root_seed), zlib.crc32(label.encode("utf-8"))])
