"""Methylation-state thresholds from fitted three-component models.

For the hypomethylated component (j = 1) and the hypermethylated one
(j = 2) the weighted density ratio

    omega_j(x) = tau_j f_j(x) / sum_{k != j} tau_k f_k(x)

is at least 1 on a low (resp. high) interval of beta values.  The
thresholds are where those intervals end: t_lo is the last crossing of
omega_1 = 1 below the hemimethylated mode, t_hi the first crossing of
omega_2 = 1 above it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .betamath import log_beta_fn
from .errors import ConfigError, ThresholdUndefinedError
from .model import FittedModel, Variant

GRID_POINTS = 10_001
BISECT_TOL = 1e-12
DEFAULT_KR_THRESHOLDS = (0.2, 0.8)
STATE_NAMES = ("hypo", "hemi", "hyper")


@dataclass(frozen=True)
class ThresholdPair:
    t_lo: float
    t_hi: float
    scope: str = "global"

    def __post_init__(self):
        if not 0.0 < self.t_lo < self.t_hi < 1.0:
            raise ThresholdUndefinedError(
                f"thresholds must satisfy 0 < t_lo < t_hi < 1, got ({self.t_lo}, {self.t_hi})")

    def classify(self, x) -> np.ndarray:
        """0 = hypo, 1 = hemi, 2 = hyper; values on a threshold take the lower state."""
        x = np.asarray(x)
        return (x > self.t_lo).astype(np.int64) + (x > self.t_hi).astype(np.int64)


def _log_weighted(x, tau, alpha, delta):
    """(len(x), K) array of log(tau_k f_k(x))."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[:, None]
    with np.errstate(divide="ignore"):
        log_tau = np.log(tau)
    return (log_tau + (alpha - 1.0) * np.log(x) + (delta - 1.0) * np.log1p(-x)
            - np.asarray(log_beta_fn(alpha, delta)))


def log_omega(x, j_index: int, tau, alpha, delta) -> np.ndarray:
    lw = _log_weighted(x, tau, alpha, delta)
    others = np.delete(lw, j_index, axis=1)
    return lw[:, j_index] - logsumexp(others, axis=1)


def _roles(tau, alpha, delta):
    if len(tau) != 3:
        raise ThresholdUndefinedError(f"thresholds need exactly three components, got {len(tau)}")
    means = alpha / (alpha + delta)
    order = np.argsort(means, kind="stable")
    return int(order[0]), int(order[1]), int(order[2])


def _split_point(a: float, d: float) -> float:
    if a > 1.0 and d > 1.0:
        return (a - 1.0) / (a + d - 2.0)
    return a / (a + d)


def _bisect(f, lo: float, hi: float) -> float:
    """Root of f between lo (f >= 0) and hi (f < 0)."""
    while hi - lo > BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if f(mid) >= 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def mixture_thresholds(tau, alpha, delta, scope: str = "global") -> ThresholdPair:
    """Grid scan then bisection for the two omega = 1 crossings."""
    tau = np.asarray(tau, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    delta = np.asarray(delta, dtype=float)
    hypo, hemi, hyper = _roles(tau, alpha, delta)
    split = _split_point(alpha[hemi], delta[hemi])
    grid = np.arange(1, GRID_POINTS + 1) / (GRID_POINTS + 1)

    w1 = log_omega(grid, hypo, tau, alpha, delta)
    below = np.flatnonzero((grid < split) & (w1 >= 0.0))
    if below.size == 0:
        raise ThresholdUndefinedError(f"{scope}: no hypo/hemi crossing (omega_1 never reaches 1)")
    i = below[-1]
    if i + 1 >= grid.size:
        raise ThresholdUndefinedError(f"{scope}: hypo/hemi crossing not bracketed")
    f1 = lambda x: float(log_omega(x, hypo, tau, alpha, delta)[0])  # noqa: E731
    t_lo = _bisect(f1, grid[i], grid[i + 1])

    w2 = log_omega(grid, hyper, tau, alpha, delta)
    above = np.flatnonzero((grid > split) & (w2 >= 0.0))
    if above.size == 0:
        raise ThresholdUndefinedError(f"{scope}: no hemi/hyper crossing (omega_2 never reaches 1)")
    i = above[0]
    if i == 0:
        raise ThresholdUndefinedError(f"{scope}: hemi/hyper crossing not bracketed")
    f2 = lambda x: float(log_omega(x, hyper, tau, alpha, delta)[0])  # noqa: E731
    # omega_2 rises through 1 here, so bisect on its negation
    t_hi = _bisect(lambda x: -f2(x), grid[i - 1], grid[i])
    return ThresholdPair(float(t_lo), float(t_hi), scope)


def _scope_block(fitted: FittedModel, scope):
    variant = fitted.spec.variant
    if variant is Variant.K_DOT_R:
        raise ConfigError("density-ratio thresholds are defined for k.. and kn. models only")
    if variant is Variant.K_DOT_DOT:
        return 0, "global"
    if scope is None or scope == "global":
        raise ConfigError("kn. models need a patient scope (index or label)")
    labels = list(fitted.patient_labels) or [str(i + 1) for i in range(fitted.N)]
    if isinstance(scope, (int, np.integer)):
        if not 0 <= scope < fitted.N:
            raise ConfigError(f"patient index {scope} out of range")
        return int(scope), labels[int(scope)]
    if str(scope) not in labels:
        raise ConfigError(f"unknown patient {scope!r}")
    n = labels.index(str(scope))
    return n, labels[n]


def _block_params(fitted: FittedModel, block: int):
    return (np.asarray(fitted.tau), fitted.shapes.alpha_free[:, block], fitted.shapes.delta_free[:, block])


def density_ratio(x, j: int, fitted: FittedModel, scope=None):
    """omega_j(x) for j = 1 (hypomethylated) or j = 2 (hypermethylated)."""
    if j not in (1, 2):
        raise ConfigError("j must be 1 (hypomethylated) or 2 (hypermethylated)")
    block, _ = _scope_block(fitted, scope)
    tau, a, d = _block_params(fitted, block)
    hypo, _, hyper = _roles(tau, a, d)
    out = np.exp(log_omega(x, hypo if j == 1 else hyper, tau, a, d))
    return float(out[0]) if np.ndim(x) == 0 else out


def infer_thresholds(fitted: FittedModel) -> dict:
    """Thresholds per scope: {"global": pair} for k.., one per patient for kn."""
    variant = fitted.spec.variant
    if variant is Variant.K_DOT_R:
        raise ConfigError("density-ratio thresholds are defined for k.. and kn. models only")
    if fitted.K != 3:
        raise ThresholdUndefinedError(f"thresholds need K = 3, model has K = {fitted.K}")
    if variant is Variant.K_DOT_DOT:
        return {"global": mixture_thresholds(*_block_params(fitted, 0), scope="global")}
    out = {}
    for n in range(fitted.N):
        _, label = _scope_block(fitted, n)
        out[label] = mixture_thresholds(*_block_params(fitted, n), scope=label)
    return out


def label_kr_clusters(fitted: FittedModel, thresholds=None) -> np.ndarray:
    """State name per (cluster, sample) of a k.r fit, from fitted means.

    ``thresholds`` maps sample label or index to a ThresholdPair or a
    (t_lo, t_hi) tuple; missing samples use (0.2, 0.8).
    """
    if fitted.spec.variant is not Variant.K_DOT_R:
        raise ConfigError("cluster state labelling applies to k.r models")
    thresholds = thresholds or {}
    samples = list(fitted.sample_labels) or [str(r) for r in range(fitted.R)]
    means = fitted.shapes.means()
    out = np.empty((fitted.K, fitted.R), dtype=object)
    for r in range(fitted.R):
        pair = thresholds.get(samples[r], thresholds.get(r, DEFAULT_KR_THRESHOLDS))
        if not isinstance(pair, ThresholdPair):
            pair = ThresholdPair(float(pair[0]), float(pair[1]), samples[r])
        states = pair.classify(means[:, r])
        out[:, r] = [STATE_NAMES[s] for s in states]
    return out
