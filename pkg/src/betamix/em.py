"""EM fitting of the constrained beta mixture models.

The M-step replaces digamma by its lower bound log(y - 1/2), which turns
the score equations for each shape block into

    log((a - 1/2) / (a + d - 1/2)) = y1,   log((d - 1/2) / (a + d - 1/2)) = y2

with y1, y2 the responsibility-weighted mean log(x) and log(1 - x) of the
block.  These have the closed-form solution in :func:`closed_form_shape`.
An exact-digamma Newton solver is kept alongside as a verification oracle
(``FitConfig.exact_mstep``).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .betamath import ShapePair, digamma_exact, log_beta_fn, trigamma_exact
from .errors import ConfigError, DegenerateStatsError, FitError
from .initialization import initial_params, kmeans_init
from .model import FitConfig, FittedModel, MethylationMatrix, ModelSpec, ShapeParams, validate

log = logging.getLogger(__name__)

EMPTY_WEIGHT = 1e-10
MAX_DEGENERATE_RUN = 10
ASCENT_SLACK = 1e-6


@dataclass(frozen=True)
class SufficientStats:
    """Per (cluster, block) M-step statistics; arrays are (K, B).

    ``sum_log_x``/``sum_log_1mx`` are the raw weighted sums over sites and
    pooled columns, ``weight`` is sum_c z_ck times the pool size, and
    y1/y2 their ratios (NaN where the cluster is empty).
    """

    y1: np.ndarray
    y2: np.ndarray
    weight: np.ndarray
    sum_log_x: np.ndarray
    sum_log_1mx: np.ndarray
    cluster_weight: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        """(K,) mask of clusters whose total responsibility is below 1e-10."""
        return self.cluster_weight < EMPTY_WEIGHT


def _column_params(tau, shapes: ShapeParams):
    a, d = shapes.per_column()
    with np.errstate(divide="ignore"):
        log_tau = np.log(np.asarray(tau, dtype=float))
    return a - 1.0, d - 1.0, -np.asarray(log_beta_fn(a, d)), log_tau


def _check_params(matrix, tau, shapes):
    tau = np.asarray(tau, dtype=float)
    if tau.shape != (shapes.K,):
        raise ConfigError(f"tau has shape {tau.shape}, expected ({shapes.K},)")
    if np.any(tau < 0) or not np.isclose(tau.sum(), 1.0, atol=1e-9):
        raise ConfigError("tau must be non-negative and sum to 1")
    if (shapes.N, shapes.R) != (matrix.N, matrix.R):
        raise ConfigError("shape parameters do not match the matrix dimensions")


def e_step_loglik(matrix: MethylationMatrix, tau, shapes: ShapeParams, backend=None):
    """Responsibilities and observed-data log-likelihood in one pass."""
    _check_params(matrix, tau, shapes)
    lx, l1x = matrix.log_columns()
    am1, dm1, const, log_tau = _column_params(tau, shapes)
    return kernels.estep_kernel(lx, l1x, am1, dm1, const, log_tau, backend)


def e_step(matrix: MethylationMatrix, tau, shapes: ShapeParams, backend=None) -> np.ndarray:
    """Posterior cluster probabilities (C, K), normalised with log-sum-exp."""
    return e_step_loglik(matrix, tau, shapes, backend)[0]


def loglik(matrix: MethylationMatrix, tau, shapes: ShapeParams, backend=None) -> float:
    """Observed-data log-likelihood sum_c log sum_k tau_k prod_{n,r} Beta(x_cnr)."""
    return float(e_step_loglik(matrix, tau, shapes, backend)[1])


def m_step_tau(responsibilities: np.ndarray) -> np.ndarray:
    return np.asarray(responsibilities).mean(axis=0)


def accumulate_stats(matrix: MethylationMatrix, responsibilities: np.ndarray, spec: ModelSpec,
                     backend=None) -> SufficientStats:
    """Weighted mean log(x) and log(1 - x) for every (cluster, shape block)."""
    z = np.ascontiguousarray(responsibilities, dtype=float)
    C, N, R = matrix.shape
    if z.ndim != 2 or z.shape[0] != C:
        raise ConfigError(f"responsibilities must be ({C}, K), got {z.shape}")
    lx, l1x = matrix.log_columns()
    s1_col, s2_col, w = kernels.colsums_kernel(z, lx, l1x, backend)
    block_of = spec.variant.block_of_column(N, R)
    B = spec.variant.n_blocks(N, R)
    K = z.shape[1]
    s1 = np.zeros((K, B))
    s2 = np.zeros((K, B))
    for j, b in enumerate(block_of):
        s1[:, b] += s1_col[:, j]
        s2[:, b] += s2_col[:, j]
    pool = np.bincount(block_of, minlength=B).astype(float)
    weight = w[:, None] * pool[None, :]
    empty = w < EMPTY_WEIGHT
    with np.errstate(invalid="ignore", divide="ignore"):
        y1 = np.where(empty[:, None], np.nan, s1 / weight)
        y2 = np.where(empty[:, None], np.nan, s2 / weight)
    return SufficientStats(y1, y2, weight, s1, s2, w)


def closed_form_shapes(y1, y2):
    """Vectorised closed-form update; returns (alpha, delta, ok_mask)."""
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e1 = np.exp(-y1)
        e2 = np.exp(-y2)
        denom = (e2 - 1.0) * (e1 - 1.0) - 1.0
        alpha = 0.5 + 0.5 * e2 / denom
        delta = 0.5 * e2 * (e1 - 1.0) / denom
        ok = (y1 < 0) & (y2 < 0) & (denom > 0) & (alpha > 0.5) & (delta > 0.5)
        ok &= np.isfinite(alpha) & np.isfinite(delta)
    return alpha, delta, ok


def closed_form_shape(y1: float, y2: float) -> ShapePair:
    """Solve the bound-approximated score equations for one block."""
    if not (y1 < 0 and y2 < 0):
        raise DegenerateStatsError(f"need y1 < 0 and y2 < 0, got ({y1}, {y2})")
    a, d, ok = closed_form_shapes(y1, y2)
    if not ok:
        raise DegenerateStatsError(f"closed-form update undefined for y1={y1}, y2={y2}")
    return ShapePair(float(a), float(d))


def approx_score_residuals(stats: SufficientStats, shapes: ShapeParams) -> np.ndarray:
    """Bound-approximated score (d/d alpha, d/d delta) per block, shape (K, B, 2).

    Each entry is sum_c z_ck sum_{pooled n,r} [log x - log((a - 1/2)/(a + d - 1/2))],
    the quantity the closed-form update sets to zero.
    """
    a, d = shapes.alpha_free, shapes.delta_free
    s = a + d - 0.5
    ga = np.log((a - 0.5) / s)
    gd = np.log((d - 0.5) / s)
    return np.stack([stats.sum_log_x - stats.weight * ga,
                     stats.sum_log_1mx - stats.weight * gd], axis=-1)


def exact_score_residuals(stats: SufficientStats, shapes: ShapeParams) -> np.ndarray:
    """Exact-digamma score per block, same layout as approx_score_residuals."""
    a, d = shapes.alpha_free, shapes.delta_free
    psi_s = digamma_exact(a + d)
    return np.stack([stats.sum_log_x - stats.weight * (digamma_exact(a) - psi_s),
                     stats.sum_log_1mx - stats.weight * (digamma_exact(d) - psi_s)], axis=-1)


def exact_shapes(y1, y2, start_alpha=None, start_delta=None, tol=1e-13, max_iter=100):
    """Newton solve of psi(a) - psi(a+d) = y1, psi(d) - psi(a+d) = y2.

    Vectorised over blocks; starts from the given shapes or, if absent, the
    closed-form estimate.  Returns (alpha, delta, converged_mask).
    """
    y1 = np.atleast_1d(np.asarray(y1, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    if start_alpha is None or start_delta is None:
        a, d, ok = closed_form_shapes(y1, y2)
        a = np.where(ok, a, 1.0)
        d = np.where(ok, d, 1.0)
    else:
        a = np.array(start_alpha, dtype=float).reshape(y1.shape)
        d = np.array(start_delta, dtype=float).reshape(y1.shape)
    done = np.zeros(y1.shape, dtype=bool)
    for _ in range(max_iter):
        psi_s = digamma_exact(a + d)
        f1 = digamma_exact(a) - psi_s - y1
        f2 = digamma_exact(d) - psi_s - y2
        done = np.maximum(np.abs(f1), np.abs(f2)) < tol
        if done.all():
            break
        t_s = trigamma_exact(a + d)
        j11 = trigamma_exact(a) - t_s
        j22 = trigamma_exact(d) - t_s
        j12 = -t_s
        det = j11 * j22 - j12 * j12
        step_a = (j22 * f1 - j12 * f2) / det
        step_d = (j11 * f2 - j12 * f1) / det
        scale = np.ones_like(a)
        # halve until both shapes stay positive
        while True:
            bad = (a - scale * step_a <= 0) | (d - scale * step_d <= 0)
            if not bad.any():
                break
            scale = np.where(bad, scale * 0.5, scale)
        a = np.where(done, a, a - scale * step_a)
        d = np.where(done, d, d - scale * step_d)
    return a, d, done


def update_shapes(stats: SufficientStats, previous: ShapeParams, exact: bool = False):
    """New ShapeParams from the statistics; degenerate blocks keep ``previous``.

    Returns (shapes, n_degenerate_blocks).
    """
    y1 = stats.y1
    y2 = stats.y2
    if exact:
        valid = np.isfinite(y1) & np.isfinite(y2) & (y1 < 0) & (y2 < 0)
        a, d, ok = exact_shapes(np.where(valid, y1, -1.0), np.where(valid, y2, -1.0),
                                previous.alpha_free, previous.delta_free)
        a = a.reshape(y1.shape)
        d = d.reshape(y1.shape)
        ok = ok.reshape(y1.shape) & valid & (a > 0) & (d > 0)
    else:
        a, d, ok = closed_form_shapes(y1, y2)
    ok &= ~stats.empty[:, None]
    alpha = np.where(ok, a, previous.alpha_free)
    delta = np.where(ok, d, previous.delta_free)
    return ShapeParams(previous.variant, alpha, delta, previous.N, previous.R), int((~ok).sum())


def canonical_order(shapes: ShapeParams) -> np.ndarray:
    """Cluster order by fitted mean of the first shape block (stable)."""
    return np.argsort(shapes.means()[:, 0], kind="stable")


@dataclass
class IterationInfo:
    """Passed to ``fit`` callbacks after each M-step."""

    iteration: int
    loglik: float
    responsibilities: np.ndarray
    stats: SufficientStats
    tau: np.ndarray
    shapes: ShapeParams
    n_degenerate: int


def fit(matrix: MethylationMatrix, spec: ModelSpec, config: FitConfig | None = None,
        callback=None, timings: dict | None = None) -> FittedModel:
    """Fit a beta mixture model by EM from a k-means start.

    Iterates until the observed-data log-likelihood changes by less than
    ``config.epsilon`` or ``config.max_iterations`` M-steps have run.
    Clusters are relabelled afterwards in increasing order of fitted mean
    in the first shape block.
    """
    config = config or FitConfig()
    spec = spec.resolved(matrix.R)
    validate(matrix, spec)
    backend = config.backend
    kernels.set_threads(config.n_threads)
    timings = timings if timings is not None else {}

    t0 = time.perf_counter()
    assignment = kmeans_init(matrix, spec.K, config.seed, backend)
    tau, shapes = initial_params(matrix, assignment, spec)
    timings["init"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    trace = []
    converged = False
    degenerate_run = 0
    degenerate_events = 0
    ascent_violations = 0
    n_mstep = 0
    while True:
        z, ll = e_step_loglik(matrix, tau, shapes, backend)
        if not np.isfinite(ll):
            raise FitError(f"non-finite log-likelihood at iteration {n_mstep}")
        if trace:
            prev = trace[-1]
            if ll < prev - ASCENT_SLACK * abs(prev):
                ascent_violations += 1
                log.warning("log-likelihood decreased by %.3g at iteration %d", prev - ll, n_mstep)
            trace.append(ll)
            if abs(ll - prev) < config.epsilon:
                converged = True
                break
        else:
            trace.append(ll)
        if n_mstep >= config.max_iterations:
            break

        tau = m_step_tau(z)
        stats = accumulate_stats(matrix, z, spec, backend)
        shapes, n_bad = update_shapes(stats, shapes, config.exact_mstep)
        n_mstep += 1
        if n_bad:
            degenerate_events += 1
            degenerate_run += 1
            log.warning("iteration %d: %d degenerate shape blocks kept previous values", n_mstep, n_bad)
            if degenerate_run >= MAX_DEGENERATE_RUN:
                raise FitError(f"degenerate M-step for {MAX_DEGENERATE_RUN} consecutive iterations")
        else:
            degenerate_run = 0
        if callback is not None:
            callback(IterationInfo(n_mstep, ll, z, stats, tau, shapes, n_bad))
    timings["em"] = time.perf_counter() - t0

    if not converged:
        log.warning("EM stopped at max_iterations=%d without converging", config.max_iterations)
    order = canonical_order(shapes)
    return FittedModel(
        spec=spec,
        tau=tau[order],
        shapes=shapes.permuted(order),
        responsibilities=np.ascontiguousarray(z[:, order]),
        loglik_trace=tuple(float(v) for v in trace),
        converged=converged,
        n_iterations=n_mstep,
        n_sites=matrix.C,
        patient_labels=tuple(matrix.patient_labels),
        sample_labels=tuple(matrix.sample_labels),
        site_ids=tuple(matrix.cpg_ids),
        degenerate_events=degenerate_events,
        ascent_violations=ascent_violations,
        config=replace(config),
    )
