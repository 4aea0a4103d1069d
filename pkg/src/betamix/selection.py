"""Model comparison criteria, partition agreement and clustering uncertainty."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import FittedModel, ModelSpec, Variant

LOG_FLOOR = math.log(1e-300)


def param_count(spec: ModelSpec, N: int, R: int) -> int:
    """Free parameters: two shapes per free block plus K - 1 mixing proportions."""
    K = spec.n_clusters(R)
    blocks = {Variant.K_DOT_DOT: 1, Variant.KN_DOT: N, Variant.K_DOT_R: R}[spec.variant]
    return 2 * K * blocks + (K - 1)


def hard_entropy(responsibilities: np.ndarray) -> float:
    """sum_c log z_{c, argmax}; the argmax tie goes to the lowest index."""
    z = np.asarray(responsibilities)
    top = z[np.arange(z.shape[0]), np.argmax(z, axis=1)]
    with np.errstate(divide="ignore"):
        logs = np.maximum(np.log(top), LOG_FLOOR)
    return float(logs.sum())


def aic_bic_icl(fitted: FittedModel, C: int | None = None):
    """(AIC, BIC, ICL) with ICL = BIC + 2 sum_c sum_k g_ck log z_ck.

    ICL needs the responsibilities; a model saved without them raises
    CapabilityError.
    """
    C = fitted.n_sites if C is None else int(C)
    Q = param_count(fitted.spec, fitted.N, fitted.R)
    ll = fitted.loglik
    aic = 2.0 * Q - 2.0 * ll
    bic = Q * math.log(C) - 2.0 * ll
    icl = bic + 2.0 * hard_entropy(fitted.require_responsibilities())
    return aic, bic, icl


@dataclass
class SelectionReport:
    rows: dict = field(default_factory=dict)  # name -> {loglik, Q, aic, bic, icl}
    best_by: dict = field(default_factory=dict)  # criterion -> name

    def table(self) -> list:
        return [dict(model=name, **vals) for name, vals in self.rows.items()]


def select_models(models: dict) -> SelectionReport:
    """Tabulate criteria for named fits; lower is better for all three.

    Fits without responsibilities get ``icl = nan`` and are skipped when
    ranking by ICL.
    """
    if not models:
        raise ConfigError("no models to compare")
    report = SelectionReport()
    for name, fm in models.items():
        Q = param_count(fm.spec, fm.N, fm.R)
        ll = fm.loglik
        aic = 2.0 * Q - 2.0 * ll
        bic = Q * math.log(fm.n_sites) - 2.0 * ll
        icl = bic + 2.0 * hard_entropy(fm.responsibilities) if fm.has_responsibilities else math.nan
        report.rows[name] = dict(loglik=ll, Q=Q, aic=aic, bic=bic, icl=icl)
    for crit in ("aic", "bic", "icl"):
        scored = [(v[crit], name) for name, v in report.rows.items() if not math.isnan(v[crit])]
        if scored:
            report.best_by[crit] = min(scored, key=lambda t: t[0])[1]
    return report


def _comb2(n):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1.0) / 2.0


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index from the pair-counting contingency table."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"label vectors must be 1-d and of equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ConfigError("ARI needs at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_cells = _comb2(table).sum()
    sum_rows = _comb2(table.sum(axis=1)).sum()
    sum_cols = _comb2(table.sum(axis=0)).sum()
    total = _comb2(a.size)
    expected = sum_rows * sum_cols / total
    maximum = 0.5 * (sum_rows + sum_cols)
    if maximum == expected:
        # both partitions trivial (all one cluster or all singletons)
        return 1.0
    return float((sum_cells - expected) / (maximum - expected))


def uncertainty(responsibilities) -> np.ndarray:
    """Per-site clustering uncertainty 1 - max_k z_ck."""
    z = np.asarray(responsibilities)
    return 1.0 - z.max(axis=1)
