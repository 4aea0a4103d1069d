"""Hot loops of the EM engine and k-means, in two interchangeable backends.

``BETAMIX_BACKEND=numpy`` forces the pure-numpy path; otherwise the numba
kernels are used when numba imports.  Both backends work on fixed-size
row chunks and reduce chunk partials in chunk order, so a given backend
returns bit-identical results for any thread count.

Data layout: ``lx`` and ``l1x`` are (J, C) C-contiguous arrays holding
log(x) and log(1 - x) for the J = N*R columns; per-column parameter
arrays are (K, J).
"""

from __future__ import annotations

import os
import warnings

import numpy as np

CHUNK = 4096

_requested = os.environ.get("BETAMIX_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"BETAMIX_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested == "numpy":
        raise ImportError
    import numba
    from numba import njit, prange

    # an old system TBB makes numba fall back to another threading layer
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def n_chunks(n_rows: int, chunk: int = CHUNK) -> int:
    return max(1, (n_rows + chunk - 1) // chunk)


def set_threads(n_threads: int | None) -> int:
    """Set the kernel thread count (None or 0 means the env/default); returns it."""
    if not HAS_NUMBA:
        return 1
    if not n_threads:
        env = os.environ.get("BETAMIX_THREADS")
        n_threads = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n_threads = max(1, min(int(n_threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n_threads)
    return n_threads


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _estep_numpy(lx, l1x, am1, dm1, col_const, log_tau, chunk=CHUNK):
    J, C = lx.shape
    K = log_tau.shape[0]
    z = np.empty((C, K))
    partial = np.empty(n_chunks(C, chunk))
    base = log_tau + col_const.sum(axis=1)
    for i, start in enumerate(range(0, C, chunk)):
        stop = min(start + chunk, C)
        # (C_chunk, K): accumulate column by column to fix summation order
        logp = np.broadcast_to(base, (stop - start, K)).copy()
        for j in range(J):
            logp += np.outer(lx[j, start:stop], am1[:, j])
            logp += np.outer(l1x[j, start:stop], dm1[:, j])
        mx = logp.max(axis=1, keepdims=True)
        e = np.exp(logp - mx)
        s = e.sum(axis=1, keepdims=True)
        z[start:stop] = e / s
        partial[i] = np.sum(mx[:, 0] + np.log(s[:, 0]))
    total = 0.0
    for p in partial:
        total += p
    return z, total


def _colsums_numpy(z, lx, l1x, chunk=CHUNK):
    J, C = lx.shape
    K = z.shape[1]
    nc = n_chunks(C, chunk)
    s1 = np.zeros((nc, K, J))
    s2 = np.zeros((nc, K, J))
    w = np.zeros((nc, K))
    for i, start in enumerate(range(0, C, chunk)):
        stop = min(start + chunk, C)
        zc = z[start:stop]
        w[i] = zc.sum(axis=0)
        for j in range(J):
            s1[i, :, j] = (zc * lx[j, start:stop, None]).sum(axis=0)
            s2[i, :, j] = (zc * l1x[j, start:stop, None]).sum(axis=0)
    return _ordered_sum(s1), _ordered_sum(s2), _ordered_sum(w)


def _ordered_sum(parts):
    out = np.zeros(parts.shape[1:])
    for p in parts:
        out += p
    return out


def _kmeans_assign_numpy(cols, centroids, chunk=CHUNK):
    J, C = cols.shape
    K = centroids.shape[0]
    labels = np.empty(C, dtype=np.int64)
    mind = np.empty(C)
    for start in range(0, C, chunk):
        stop = min(start + chunk, C)
        d = np.zeros((stop - start, K))
        for j in range(J):
            diff = cols[j, start:stop, None] - centroids[None, :, j]
            d += diff * diff
        lab = d.argmin(axis=1)
        labels[start:stop] = lab
        mind[start:stop] = d[np.arange(stop - start), lab]
    return labels, mind


def _cluster_sums_numpy(cols, labels, K, chunk=CHUNK):
    J, C = cols.shape
    nc = n_chunks(C, chunk)
    sums = np.zeros((nc, K, J))
    counts = np.zeros((nc, K), dtype=np.int64)
    for i, start in enumerate(range(0, C, chunk)):
        stop = min(start + chunk, C)
        lab = labels[start:stop]
        counts[i] = np.bincount(lab, minlength=K)
        for j in range(J):
            sums[i, :, j] = np.bincount(lab, weights=cols[j, start:stop], minlength=K)
    return _ordered_sum(sums), counts.sum(axis=0)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(parallel=True, cache=True)
    def _estep_numba(lx, l1x, am1, dm1, col_const, log_tau, chunk=CHUNK):
        J, C = lx.shape
        K = log_tau.shape[0]
        nc = max(1, (C + chunk - 1) // chunk)
        z = np.empty((C, K))
        partial = np.zeros(nc)
        base = log_tau.copy()
        for k in range(K):
            for j in range(J):
                base[k] += col_const[k, j]
        for i in prange(nc):
            start = i * chunk
            stop = min(start + chunk, C)
            row = np.empty(K)
            acc = 0.0
            for c in range(start, stop):
                mx = -np.inf
                for k in range(K):
                    v = base[k]
                    for j in range(J):
                        v += lx[j, c] * am1[k, j]
                        v += l1x[j, c] * dm1[k, j]
                    row[k] = v
                    if v > mx:
                        mx = v
                s = 0.0
                for k in range(K):
                    row[k] = np.exp(row[k] - mx)
                    s += row[k]
                for k in range(K):
                    z[c, k] = row[k] / s
                acc += mx + np.log(s)
            partial[i] = acc
        total = 0.0
        for i in range(nc):
            total += partial[i]
        return z, total

    @njit(parallel=True, cache=True)
    def _colsums_numba(z, lx, l1x, chunk=CHUNK):
        J, C = lx.shape
        K = z.shape[1]
        nc = max(1, (C + chunk - 1) // chunk)
        s1p = np.zeros((nc, K, J))
        s2p = np.zeros((nc, K, J))
        wp = np.zeros((nc, K))
        for i in prange(nc):
            start = i * chunk
            stop = min(start + chunk, C)
            for c in range(start, stop):
                for k in range(K):
                    zk = z[c, k]
                    wp[i, k] += zk
                    for j in range(J):
                        s1p[i, k, j] += zk * lx[j, c]
                        s2p[i, k, j] += zk * l1x[j, c]
        s1 = np.zeros((K, J))
        s2 = np.zeros((K, J))
        w = np.zeros(K)
        for i in range(nc):
            for k in range(K):
                w[k] += wp[i, k]
                for j in range(J):
                    s1[k, j] += s1p[i, k, j]
                    s2[k, j] += s2p[i, k, j]
        return s1, s2, w

    @njit(parallel=True, cache=True)
    def _kmeans_assign_numba(cols, centroids, chunk=CHUNK):
        J, C = cols.shape
        K = centroids.shape[0]
        nc = max(1, (C + chunk - 1) // chunk)
        labels = np.empty(C, dtype=np.int64)
        mind = np.empty(C)
        for i in prange(nc):
            start = i * chunk
            stop = min(start + chunk, C)
            for c in range(start, stop):
                best = np.inf
                arg = 0
                for k in range(K):
                    d = 0.0
                    for j in range(J):
                        diff = cols[j, c] - centroids[k, j]
                        d += diff * diff
                    if d < best:
                        best = d
                        arg = k
                labels[c] = arg
                mind[c] = best
        return labels, mind

    @njit(parallel=True, cache=True)
    def _cluster_sums_numba(cols, labels, K, chunk=CHUNK):
        J, C = cols.shape
        nc = max(1, (C + chunk - 1) // chunk)
        sp = np.zeros((nc, K, J))
        cp = np.zeros((nc, K), dtype=np.int64)
        for i in prange(nc):
            start = i * chunk
            stop = min(start + chunk, C)
            for c in range(start, stop):
                k = labels[c]
                cp[i, k] += 1
                for j in range(J):
                    sp[i, k, j] += cols[j, c]
        sums = np.zeros((K, J))
        counts = np.zeros(K, dtype=np.int64)
        for i in range(nc):
            for k in range(K):
                counts[k] += cp[i, k]
                for j in range(J):
                    sums[k, j] += sp[i, k, j]
        return sums, counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def estep_kernel(lx, l1x, am1, dm1, col_const, log_tau, backend=None):
    """Responsibilities (C, K) and the observed-data log-likelihood.

    ``am1``/``dm1`` are alpha-1 and delta-1 per (cluster, column) and
    ``col_const`` is -log B per (cluster, column).
    """
    if _use_numba(backend):
        return _estep_numba(lx, l1x, am1, dm1, col_const, log_tau)
    return _estep_numpy(lx, l1x, am1, dm1, col_const, log_tau)


def colsums_kernel(z, lx, l1x, backend=None):
    """Weighted per-column sums S1[k, j] = sum_c z[c,k] lx[j,c], S2 likewise, and weights."""
    if _use_numba(backend):
        return _colsums_numba(z, lx, l1x)
    return _colsums_numpy(z, lx, l1x)


def kmeans_assign_kernel(cols, centroids, backend=None):
    """Nearest-centroid labels (ties to the lowest index) and squared distances."""
    if _use_numba(backend):
        return _kmeans_assign_numba(cols, centroids)
    return _kmeans_assign_numpy(cols, centroids)


def cluster_sums_kernel(cols, labels, K, backend=None):
    """Per-cluster column sums and member counts for a hard labelling."""
    if _use_numba(backend):
        return _cluster_sums_numba(cols, labels, K)
    return _cluster_sums_numpy(cols, labels, K)


def _use_numba(backend):
    if backend is None:
        return HAS_NUMBA
    if backend == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    return backend == "numba"
