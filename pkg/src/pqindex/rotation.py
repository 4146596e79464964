"""Orthonormal rotation built from Givens factors, trained by coordinate descent."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, ParameterError

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class GivensFactor:
    i: int
    j: int
    theta: float


@dataclass
class RotationConfig:
    num_pairs: int = 64  # candidate axis pairs sampled per update
    line_search_iters: int = 20
    max_angle: float = math.pi / 8


class RotationMatrix:
    """Product of Givens factors with a dense float64 cache.

    The cache premultiplies: appending factor G makes the matrix G @ R. It is
    rebuilt from the factor list every `rebuild_period` appends to keep float
    drift bounded; orthonormality holds to ~1e-13 either way.
    """

    rebuild_period = 1000

    def __init__(self, dim: int):
        if dim < 2:
            raise ParameterError(f"rotation needs dim >= 2, got {dim}")
        self.dim = dim
        self.factors: list[GivensFactor] = []
        self.dense = np.eye(dim, dtype=np.float64)

    def rotate(self, x) -> np.ndarray:
        """R x for a (d,) vector or (n, d) batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"rotate: dim {x.shape[-1]} != {self.dim}")
        return x @ self.dense.T

    def rotate_back(self, a) -> np.ndarray:
        """R^T a, the inverse of rotate."""
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-1] != self.dim:
            raise DimensionMismatch(f"rotate_back: dim {a.shape[-1]} != {self.dim}")
        return a @ self.dense

    def append(self, i: int, j: int, theta: float) -> None:
        if not (0 <= i < j < self.dim):
            raise ParameterError(f"bad axis pair ({i}, {j}) for dim {self.dim}")
        self.factors.append(GivensFactor(i, j, float(theta)))
        self._apply(self.dense, i, j, theta)
        if len(self.factors) % self.rebuild_period == 0:
            self.rebuild()

    def rebuild(self) -> None:
        """Recompute the dense cache from the factor list."""
        self.dense = np.eye(self.dim, dtype=np.float64)
        for f in self.factors:
            self._apply(self.dense, f.i, f.j, f.theta)

    @staticmethod
    def _apply(dense: np.ndarray, i: int, j: int, theta: float) -> None:
        c, s = math.cos(theta), math.sin(theta)
        ri = dense[i].copy()
        rj = dense[j].copy()
        dense[i] = c * ri - s * rj
        dense[j] = s * ri + c * rj

    def orthonormality_error(self) -> float:
        return float(np.abs(self.dense @ self.dense.T - np.eye(self.dim)).max())

    def copy(self) -> "RotationMatrix":
        other = RotationMatrix(self.dim)
        other.factors = list(self.factors)
        other.dense = self.dense.copy()
        return other


def givens_grad_at_zero(err, xr, i: int, j: int) -> float:
    """d/d theta at theta=0 of the squared error after appending G(i, j, theta).

    `err` is (quantized - xr) in rotated space. Accepts single vectors or
    batches; batch gradients are summed.
    """
    if i == j:
        raise ParameterError(f"axis pair must be distinct, got ({i}, {j})")
    err = np.asarray(err, dtype=np.float64)
    xr = np.asarray(xr, dtype=np.float64)
    if err.shape != xr.shape:
        raise DimensionMismatch(f"givens_grad_at_zero: {err.shape} vs {xr.shape}")
    g = 2.0 * (err[..., i] * xr[..., j] - err[..., j] * xr[..., i])
    return float(np.sum(g))


def steepest_update(
    rot: RotationMatrix,
    xr: np.ndarray,
    err: np.ndarray,
    rng: np.random.Generator,
    cfg: RotationConfig | None = None,
) -> dict:
    """One block coordinate descent step on the rotation.

    Samples candidate axis pairs, picks the one with the largest absolute
    batch gradient at theta=0, then golden-section line searches the angle
    with code assignments frozen. theta=0 stays a candidate, so the batch
    distortion never increases. Appends the winning factor to `rot` in place.

    Returns a stats dict: pair, theta, grad, distortion before/after.
    """
    if cfg is None:
        cfg = RotationConfig()
    xr = np.asarray(xr, dtype=np.float64)
    err = np.asarray(err, dtype=np.float64)
    if xr.ndim != 2 or xr.shape != err.shape:
        raise DimensionMismatch(f"steepest_update: xr {xr.shape} vs err {err.shape}")
    if xr.shape[0] == 0:
        raise DegenerateInput("steepest_update: empty batch")
    d = rot.dim
    if xr.shape[1] != d:
        raise DimensionMismatch(f"steepest_update: dim {xr.shape[1]} != {d}")

    all_i, all_j = np.triu_indices(d, k=1)
    n_pairs = all_i.size
    take = min(cfg.num_pairs, n_pairs)
    sel = rng.choice(n_pairs, size=take, replace=False)
    cand_i, cand_j = all_i[sel], all_j[sel]

    # g(i,j) = 2 sum_b (err_i xr_j - err_j xr_i) = 2 (M_ij - M_ji), M = err^T xr
    m = err.T @ xr
    grads = 2.0 * (m[cand_i, cand_j] - m[cand_j, cand_i])
    best = int(np.argmax(np.abs(grads)))
    i, j = int(cand_i[best]), int(cand_j[best])

    xi, xj = xr[:, i], xr[:, j]
    qi, qj = xi + err[:, i], xj + err[:, j]

    def pair_sq_err(theta: float) -> float:
        c, s = math.cos(theta), math.sin(theta)
        di = qi - (c * xi - s * xj)
        dj = qj - (s * xi + c * xj)
        return float(np.dot(di, di) + np.dot(dj, dj))

    a, b = -cfg.max_angle, cfg.max_angle
    lo = b - _INVPHI * (b - a)
    hi = a + _INVPHI * (b - a)
    f_lo, f_hi = pair_sq_err(lo), pair_sq_err(hi)
    for _ in range(cfg.line_search_iters):
        if f_lo <= f_hi:
            b, hi, f_hi = hi, lo, f_lo
            lo = b - _INVPHI * (b - a)
            f_lo = pair_sq_err(lo)
        else:
            a, lo, f_lo = lo, hi, f_hi
            hi = a + _INVPHI * (b - a)
            f_hi = pair_sq_err(hi)
    interior = lo if f_lo <= f_hi else hi

    f0 = pair_sq_err(0.0)
    theta, f_theta = 0.0, f0
    for cand in (interior, -cfg.max_angle, cfg.max_angle):
        fc = pair_sq_err(cand)
        if fc < f_theta:
            theta, f_theta = cand, fc

    before = float(np.einsum("ij,ij->", err, err))
    after = before - (f0 - f_theta)
    if theta != 0.0:
        rot.append(i, j, theta)
    return {
        "pair": (i, j),
        "theta": theta,
        "grad": float(grads[best]),
        "before": before,
        "after": after,
    }
