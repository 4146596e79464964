"""Seeded k-means with k-means++ init, used for codebook warm starts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, ParameterError

# Incremented on every kmeans_fit call; index build asserts it stays flat.
fit_calls = 0

# Below this many point*centroid*dim products the assignment scan runs in exact
# float64; above it, scores go through float32 BLAS for speed.
_EXACT_SCAN_LIMIT = 10_000_000

# Lloyd sticks in partition-stable local optima surprisingly often on small
# instances; cheap restarts fix that. Above this work bound a single
# k-means++ init is the usual practice and restarts would dominate runtime.
_RESTART_LIMIT = 100_000
_SMALL_RESTARTS = 10


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (k, d) float32
    assignments: np.ndarray  # (n,) int64
    distortion: float  # mean squared distance, float64 accumulation
    n_iter: int


def nearest_centroid(x, centroids) -> tuple[int, float]:
    """Index of the closest centroid and its exact squared distance.

    Ties resolve to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2 or x.ndim != 1 or c.shape[1] != x.shape[0]:
        raise DimensionMismatch(f"nearest_centroid: point {x.shape} vs centroids {c.shape}")
    diff = c - x[None, :]
    d2 = np.einsum("ij,ij->i", diff, diff)
    idx = int(np.argmin(d2))
    return idx, float(d2[idx])


def nearest_many(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per row. Ties resolve to the lowest index."""
    points = np.asarray(points)
    centroids = np.asarray(centroids)
    if points.ndim != 2 or centroids.ndim != 2 or points.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(
            f"nearest_many: points {points.shape} vs centroids {centroids.shape}"
        )
    work = points.shape[0] * centroids.shape[0] * points.shape[1]
    if work <= _EXACT_SCAN_LIMIT:
        p = points.astype(np.float64, copy=False)
        c = centroids.astype(np.float64, copy=False)
    else:
        p = points.astype(np.float32, copy=False)
        c = centroids.astype(np.float32, copy=False)
    # argmin ||p - c||^2 == argmin (||c||^2 - 2 p.c); the ||p||^2 term is constant.
    scores = np.einsum("ij,ij->i", c, c)[None, :] - 2.0 * (p @ c.T)
    return np.argmin(scores, axis=1)


def _chosen_sq_dists(points64: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> np.ndarray:
    diff = points64 - centroids.astype(np.float64, copy=False)[assign]
    return np.einsum("ij,ij->i", diff, diff)


def _kmeanspp(points64: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points64.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    diff = points64 - points64[chosen[0]]
    d2 = np.einsum("ij,ij->i", diff, diff)
    for i in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        chosen[i] = idx
        diff = points64 - points64[idx]
        d2 = np.minimum(d2, np.einsum("ij,ij->i", diff, diff))
    return points64[chosen].copy()


def kmeans_fit(
    points,
    k: int,
    rng: np.random.Generator,
    iters: int = 20,
    tol: float = 1e-4,
    n_init: int | None = None,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of n_init restarts.

    Empty clusters are reseeded to the point farthest from its assigned
    centroid. Each run stops early when the relative distortion improvement
    falls below `tol`; the per-iteration distortion sequence is checked to
    be non-increasing. n_init=None picks restarts by problem size: small
    instances get several (local optima are common there and runs are
    nearly free), large ones a single init.

    Args:
        points: (n, d) array.
        k: number of centroids, 1 <= k <= n.
        rng: generator driving seeding and reseeds.
        iters: maximum Lloyd iterations per run.
        tol: relative improvement threshold for early exit.
        n_init: restarts; keeps the run with the lowest distortion.

    Returns:
        KMeansResult with float32 centroids and float64-accumulated distortion.
    """
    global fit_calls
    fit_calls += 1

    points = np.asarray(points)
    if points.ndim != 2:
        raise DimensionMismatch(f"kmeans_fit: points must be 2-D, got {points.shape}")
    n = points.shape[0]
    if n == 0:
        raise DegenerateInput("kmeans_fit: empty point set")
    if not (1 <= k <= n):
        raise ParameterError(f"kmeans_fit: k={k} not in [1, {n}]")
    if iters < 1:
        raise ParameterError(f"kmeans_fit: iters={iters} must be >= 1")
    if n_init is None:
        n_init = _SMALL_RESTARTS if n * k * points.shape[1] <= _RESTART_LIMIT else 1
    if n_init < 1:
        raise ParameterError(f"kmeans_fit: n_init={n_init} must be >= 1")

    points64 = points.astype(np.float64, copy=False)
    best: KMeansResult | None = None
    for _ in range(n_init):
        result = _fit_once(points64, k, rng, iters, tol)
        if best is None or result.distortion < best.distortion:
            best = result
        if best.distortion == 0.0:
            break
    return best


def _fit_once(
    points64: np.ndarray,
    k: int,
    rng: np.random.Generator,
    iters: int,
    tol: float,
) -> KMeansResult:
    centroids = _kmeanspp(points64, k, rng)

    prev = None
    assign = None
    dist = 0.0
    n_iter = 0
    for it in range(iters):
        n_iter = it + 1
        assign = nearest_many(points64, centroids)
        d2 = _chosen_sq_dists(points64, centroids, assign)
        dist = float(d2.mean())
        if prev is not None:
            if dist > prev * (1 + 1e-6) + 1e-9:
                raise AssertionError(f"kmeans distortion rose: {prev} -> {dist}")
            if prev - dist <= tol * prev:
                break
        prev = dist

        counts = np.bincount(assign, minlength=k)
        sums = np.empty((k, points64.shape[1]), dtype=np.float64)
        for j in range(points64.shape[1]):
            sums[:, j] = np.bincount(assign, weights=points64[:, j], minlength=k)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        if not nonempty.all():
            d2_pool = d2.copy()
            for c in np.flatnonzero(~nonempty):
                far = int(np.argmax(d2_pool))
                centroids[c] = points64[far]
                d2_pool[far] = 0.0
    else:
        # All iterations used; the last update moved centroids, refresh the
        # assignment so the returned triple is coherent.
        assign = nearest_many(points64, centroids)
        d2 = _chosen_sq_dists(points64, centroids, assign)
        dist = float(d2.mean())
        if prev is not None and dist > prev * (1 + 1e-6) + 1e-9:
            raise AssertionError(f"kmeans distortion rose: {prev} -> {dist}")

    return KMeansResult(
        centroids=centroids.astype(np.float32),
        assignments=assign.astype(np.int64),
        distortion=dist,
        n_iter=n_iter,
    )
