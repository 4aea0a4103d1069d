"""EM starting point: k-means on CpG rows, then moment-matched beta shapes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .betamath import mom_estimate
from .errors import ConfigError, InfeasibleMomentsError
from .model import MethylationMatrix, ModelSpec, ShapeParams

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6
MAX_RESEEDS = 10
VARIANCE_FLOOR = 1e-8
SHAPE_FLOOR = 0.51
SHAPE_FALLBACK = 1.01


@dataclass(frozen=True)
class InitAssignment:
    labels: np.ndarray
    counts: np.ndarray

    @property
    def K(self) -> int:
        return len(self.counts)


def rng_for(seed: int) -> np.random.Generator:
    """Counter-based generator used for all seeding decisions."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def _kmeanspp(cols: np.ndarray, K: int, rng: np.random.Generator, backend) -> np.ndarray:
    J, C = cols.shape
    centroids = np.empty((K, J))
    centroids[0] = cols[:, rng.integers(C)]
    _, d2 = kernels.kmeans_assign_kernel(cols, centroids[:1], backend)
    for k in range(1, K):
        total = d2.sum()
        if total > 0:
            # inverse-CDF draw on the squared-distance weights
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, C - 1)
        else:
            idx = int(rng.integers(C))
        centroids[k] = cols[:, idx]
        _, d2 = kernels.kmeans_assign_kernel(cols, centroids[: k + 1], backend)
    return centroids


def kmeans_init(matrix: MethylationMatrix, K: int, seed: int, backend=None) -> InitAssignment:
    """Lloyd's algorithm on the C rows with k-means++ seeding.

    Each row is the N*R vector of a site's beta values.  Empty clusters are
    re-seeded at the point farthest from its nearest centroid.
    """
    if K < 1:
        raise ConfigError("K must be >= 1")
    C = matrix.C
    if C < K:
        raise ConfigError(f"cannot form K = {K} clusters from C = {C} sites")
    cols = matrix.columns
    if K == 1:
        return InitAssignment(np.zeros(C, dtype=np.int64), np.array([C], dtype=np.int64))

    rng = rng_for(seed)
    centroids = _kmeanspp(cols, K, rng, backend)
    labels, d2 = kernels.kmeans_assign_kernel(cols, centroids, backend)
    reseeds = 0
    for _ in range(KMEANS_MAX_ITER):
        sums, counts = kernels.cluster_sums_kernel(cols, labels, K, backend)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            if reseeds >= MAX_RESEEDS:
                raise ConfigError(f"k-means left {empty.size} empty clusters after {MAX_RESEEDS} re-seeds")
            reseeds += 1
            for k in empty:
                far = int(np.argmax(d2))
                centroids[k] = cols[:, far]
                d2[far] = 0.0
            labels, d2 = kernels.kmeans_assign_kernel(cols, centroids, backend)
            continue
        new = sums / counts[:, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        labels, d2 = kernels.kmeans_assign_kernel(cols, centroids, backend)
        if shift < KMEANS_TOL:
            break

    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise ConfigError("k-means produced an empty cluster")
    return InitAssignment(labels.astype(np.int64), counts.astype(np.int64))


def initial_params(matrix: MethylationMatrix, assignment: InitAssignment, spec: ModelSpec):
    """Mixing proportions and moment-matched shapes from a hard assignment.

    Values of every column tied to a shape block are pooled before taking
    the mean and variance.  Returns ``(tau, ShapeParams)``.
    """
    C, N, R = matrix.shape
    labels = np.asarray(assignment.labels)
    if labels.shape != (C,):
        raise ConfigError("assignment length differs from the number of sites")
    K = assignment.K
    counts = np.bincount(labels, minlength=K)
    if counts.shape[0] != K or np.any(labels < 0):
        raise ConfigError("assignment labels out of range")
    tau = counts / C

    variant = spec.variant
    block_of = variant.block_of_column(N, R)
    B = variant.n_blocks(N, R)
    alpha = np.empty((K, B))
    delta = np.empty((K, B))
    cols = matrix.columns
    for k in range(K):
        members = labels == k
        for b in range(B):
            pooled = cols[block_of == b][:, members].ravel()
            alpha[k, b], delta[k, b] = _block_moments(pooled, k, b)
    return tau, ShapeParams(variant, alpha, delta, N, R)


def _block_moments(pooled: np.ndarray, k: int, b: int):
    if pooled.size == 0:
        log.warning("cluster %d block %d has no members; using fallback shapes", k, b)
        return SHAPE_FALLBACK, SHAPE_FALLBACK
    mean = float(pooled.mean())
    var = max(float(pooled.var()), VARIANCE_FLOOR)
    try:
        pair = mom_estimate(mean, var)
    except InfeasibleMomentsError:
        log.warning("infeasible moments in cluster %d block %d; using fallback shapes", k, b)
        return SHAPE_FALLBACK, SHAPE_FALLBACK
    a = pair.alpha if pair.alpha > SHAPE_FLOOR else SHAPE_FALLBACK
    d = pair.delta if pair.delta > SHAPE_FLOOR else SHAPE_FALLBACK
    return a, d
