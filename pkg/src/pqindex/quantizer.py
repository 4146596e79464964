"""IVF-PQ quantization layer: coarse cells, per-subspace codebooks, rotation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kmeans
from .errors import DegenerateInput, DimensionMismatch, IndexCorruption, ParameterError
from .rotation import RotationMatrix


class ItemCode(NamedTuple):
    coarse: int
    pq: np.ndarray  # (D,) uint8


@dataclass
class RegStats:
    """Raw (unscaled) regularizer sums and gradients for one batch.

    loss_sum is sum_b ||decode(code_b) - x'_b||^2 in rotated space; the
    caller divides by batch size and applies its own weight. Gradients go to
    the codebooks only, never to the inputs or the rotation.
    """

    loss_sum: float
    coarse_grad: np.ndarray  # (J, d) float64
    pq_grad: np.ndarray  # (D, K, d/D) float64
    xr: np.ndarray  # (n, d) rotated inputs
    recon: np.ndarray  # (n, d) decode output in rotated space
    err: np.ndarray  # (n, d) recon - xr
    coarse_codes: np.ndarray  # (n,)
    pq_codes: np.ndarray  # (n, D)


def _as2d(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise DimensionMismatch(f"expected vector or batch, got shape {x.shape}")


class QuantizerLayer:
    """Differentiable-in-training IVF-PQ quantizer for item embeddings.

    Holds the coarse codebook (J cells over the rotated space), D per-subspace
    PQ codebooks of K centroids each, and the learned rotation. Encoding picks
    the nearest coarse cell, then quantizes the residual subspace by subspace;
    decoding adds the pieces back and undoes the rotation.

    Code assignments are recomputed on every forward pass; nothing is cached
    between calls.
    """

    def __init__(
        self,
        coarse: np.ndarray,
        pq: np.ndarray,
        rotation: RotationMatrix | None = None,
        reg_weight: float = 0.1,
        rotation_enabled: bool = True,
    ):
        coarse = np.asarray(coarse, dtype=np.float32)
        pq = np.asarray(pq, dtype=np.float32)
        if coarse.ndim != 2:
            raise DimensionMismatch(f"coarse codebook must be (J, d), got {coarse.shape}")
        if pq.ndim != 3:
            raise DimensionMismatch(f"pq codebook must be (D, K, d/D), got {pq.shape}")
        d = coarse.shape[1]
        n_sub, k, sub_dim = pq.shape
        if n_sub < 1 or d % n_sub != 0 or sub_dim != d // n_sub:
            raise ParameterError(f"pq shape {pq.shape} does not tile dim {d}")
        if not (1 <= k <= 256):
            raise ParameterError(f"K={k} must be in [1, 256] to fit u8 codes")
        if coarse.shape[0] < 1:
            raise ParameterError("need at least one coarse centroid")
        if reg_weight < 0:
            raise ParameterError(f"reg_weight={reg_weight} must be >= 0")
        if rotation is None:
            rotation = RotationMatrix(d)
        if rotation.dim != d:
            raise DimensionMismatch(f"rotation dim {rotation.dim} != {d}")
        self.coarse = coarse
        self.pq = pq
        self.rotation = rotation
        self.reg_weight = float(reg_weight)
        self.rotation_enabled = bool(rotation_enabled)

    @property
    def d(self) -> int:
        return self.coarse.shape[1]

    @property
    def n_cells(self) -> int:
        return self.coarse.shape[0]

    @property
    def n_subspaces(self) -> int:
        return self.pq.shape[0]

    @property
    def n_codewords(self) -> int:
        return self.pq.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.pq.shape[2]

    # -- construction ------------------------------------------------------

    @classmethod
    def warm_start(
        cls,
        item_embeddings: np.ndarray,
        n_cells: int,
        n_codewords: int,
        n_subspaces: int,
        rng: np.random.Generator,
        reg_weight: float = 0.1,
        rotation_enabled: bool = True,
        kmeans_iters: int = 20,
    ) -> "QuantizerLayer":
        """Initialize codebooks by clustering the current item embeddings.

        The coarse codebook comes from k-means over the embeddings, the PQ
        codebooks from per-subspace k-means over the coarse residuals. The
        rotation starts at identity either way.
        """
        emb = np.asarray(item_embeddings)
        if emb.ndim != 2:
            raise DimensionMismatch(f"embeddings must be (n, d), got {emb.shape}")
        n, d = emb.shape
        if n < n_cells or n < n_codewords:
            raise ParameterError(
                f"warm start needs >= max(J, K) items, got n={n}, J={n_cells}, K={n_codewords}"
            )
        if n_subspaces < 1 or d % n_subspaces != 0:
            raise ParameterError(f"D={n_subspaces} does not divide d={d}")
        coarse_fit = kmeans.kmeans_fit(emb, n_cells, rng, iters=kmeans_iters)
        resid = emb.astype(np.float64) - coarse_fit.centroids.astype(np.float64)[
            coarse_fit.assignments
        ]
        sub = d // n_subspaces
        pq = np.empty((n_subspaces, n_codewords, sub), dtype=np.float32)
        for j in range(n_subspaces):
            fit = kmeans.kmeans_fit(resid[:, j * sub : (j + 1) * sub], n_codewords, rng, iters=kmeans_iters)
            pq[j] = fit.centroids
        return cls(
            coarse_fit.centroids,
            pq,
            rotation=RotationMatrix(d),
            reg_weight=reg_weight,
            rotation_enabled=rotation_enabled,
        )

    @classmethod
    def cold_start(
        cls,
        d: int,
        n_cells: int,
        n_codewords: int,
        n_subspaces: int,
        rng: np.random.Generator,
        reg_weight: float = 0.1,
        rotation_enabled: bool = True,
    ) -> "QuantizerLayer":
        """Random codebooks with fan-based uniform init, no data involved."""
        if n_subspaces < 1 or d % n_subspaces != 0:
            raise ParameterError(f"D={n_subspaces} does not divide d={d}")
        sub = d // n_subspaces
        lim_c = np.sqrt(6.0 / (n_cells + d))
        lim_p = np.sqrt(6.0 / (n_codewords + sub))
        coarse = rng.uniform(-lim_c, lim_c, size=(n_cells, d)).astype(np.float32)
        pq = rng.uniform(-lim_p, lim_p, size=(n_subspaces, n_codewords, sub)).astype(np.float32)
        return cls(
            coarse,
            pq,
            rotation=RotationMatrix(d),
            reg_weight=reg_weight,
            rotation_enabled=rotation_enabled,
        )

    # -- rotation ----------------------------------------------------------

    def rotate(self, x) -> np.ndarray:
        if not self.rotation_enabled or not self.rotation.factors:
            # identity; the dense multiply would reproduce x bit for bit
            return np.asarray(x, dtype=np.float64)
        return self.rotation.rotate(x)

    def rotate_back(self, a) -> np.ndarray:
        if not self.rotation_enabled or not self.rotation.factors:
            return np.asarray(a, dtype=np.float64)
        return self.rotation.rotate_back(a)

    # -- encode / decode ---------------------------------------------------

    def coarse_assign(self, xr) -> int | np.ndarray:
        """Nearest coarse cell for rotated input(s); ties take the lowest index."""
        x2, single = _as2d(xr)
        if x2.shape[1] != self.d:
            raise DimensionMismatch(f"coarse_assign: dim {x2.shape[1]} != {self.d}")
        idx = kmeans.nearest_many(x2, self.coarse)
        return int(idx[0]) if single else idx

    def pq_encode(self, y) -> np.ndarray:
        """Per-subspace codeword indices for residual(s), shape (..., D) uint8."""
        y2, single = _as2d(y)
        if y2.shape[1] != self.d:
            raise DimensionMismatch(f"pq_encode: dim {y2.shape[1]} != {self.d}")
        sub = self.sub_dim
        codes = np.empty((y2.shape[0], self.n_subspaces), dtype=np.uint8)
        for j in range(self.n_subspaces):
            codes[:, j] = kmeans.nearest_many(y2[:, j * sub : (j + 1) * sub], self.pq[j])
        return codes[0] if single else codes

    def decode(self, coarse_codes, pq_codes) -> np.ndarray:
        """Reconstruction in rotated space: v_r plus the selected sub-centroids."""
        cc = np.atleast_1d(np.asarray(coarse_codes))
        pc, single = _as2d(pq_codes)
        if cc.shape[0] != pc.shape[0] or pc.shape[1] != self.n_subspaces:
            raise DimensionMismatch(
                f"decode: {cc.shape[0]} coarse codes vs pq codes {pc.shape}"
            )
        if cc.min() < 0 or cc.max() >= self.n_cells:
            raise IndexCorruption(f"coarse code out of range [0, {self.n_cells})")
        if pc.min() < 0 or pc.max() >= self.n_codewords:
            raise IndexCorruption(f"pq code out of range [0, {self.n_codewords})")
        recon = self.coarse.astype(np.float64)[cc]
        sub = self.sub_dim
        for j in range(self.n_subspaces):
            recon[:, j * sub : (j + 1) * sub] += self.pq[j].astype(np.float64)[pc[:, j]]
        return recon[0] if single else recon

    def encode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Codes for raw-space input(s): (coarse, pq)."""
        x2, single = _as2d(x)
        xr = self.rotate(x2)
        cc = kmeans.nearest_many(xr, self.coarse)
        y = xr - self.coarse.astype(np.float64)[cc]
        pc = self.pq_encode(y)
        if single:
            return int(cc[0]), pc[0]
        return cc, pc

    def full_quantize(self, x):
        """Quantize raw-space input(s); returns (quantized, coarse, pq).

        The quantized output lives back in raw space (rotation undone). For a
        single vector the codes come back as (int, (D,) array); `ItemCode` is
        a convenience wrapper for carrying that pair around.
        """
        x2, single = _as2d(x)
        if x2.shape[1] != self.d:
            raise DimensionMismatch(f"full_quantize: dim {x2.shape[1]} != {self.d}")
        xr = self.rotate(x2)
        cc = kmeans.nearest_many(xr, self.coarse)
        y = xr - self.coarse.astype(np.float64)[cc]
        pc = self.pq_encode(y)
        recon = self.decode(cc, pc)
        out = self.rotate_back(recon)
        if single:
            return out[0], int(cc[0]), pc[0]
        return out, cc, pc

    def straight_through(self, x) -> np.ndarray:
        """Forward value of the straight-through estimator: the quantized x.

        Backward contract: the gradient of any downstream scalar with respect
        to x is the gradient with respect to this output, unchanged. Callers
        doing manual backprop apply their output gradient directly to x.
        """
        x2, single = _as2d(x)
        out = self.full_quantize(x2)[0]
        return out[0] if single else out

    # -- distortion regularizer -------------------------------------------

    def reg_loss_and_grads(self, x) -> RegStats:
        """Squared quantization error and its codebook gradients for a batch.

        The error is measured in rotated space, ||decode(code) - Rx||^2,
        which matches the raw-space distortion because the rotation is
        orthonormal. The quantized target is treated as the moving part:
        gradient 2 (decode - Rx) goes to the selected coarse centroid in
        full and to each selected PQ centroid on its own sub-slice. x and
        the rotation receive nothing.
        """
        x2, _ = _as2d(x)
        if x2.shape[0] == 0:
            raise DegenerateInput("reg_loss_and_grads: empty batch")
        xr = self.rotate(x2)
        cc = kmeans.nearest_many(xr, self.coarse)
        y = xr - self.coarse.astype(np.float64)[cc]
        pc = self.pq_encode(y)
        recon = self.decode(cc, pc)
        err = recon - xr
        loss_sum = float(np.einsum("ij,ij->", err, err))
        g = 2.0 * err
        coarse_grad = np.zeros(self.coarse.shape, dtype=np.float64)
        np.add.at(coarse_grad, cc, g)
        pq_grad = np.zeros(self.pq.shape, dtype=np.float64)
        sub = self.sub_dim
        for j in range(self.n_subspaces):
            np.add.at(pq_grad[j], pc[:, j], g[:, j * sub : (j + 1) * sub])
        return RegStats(
            loss_sum=loss_sum,
            coarse_grad=coarse_grad,
            pq_grad=pq_grad,
            xr=xr,
            recon=recon,
            err=err,
            coarse_codes=cc,
            pq_codes=pc,
        )
