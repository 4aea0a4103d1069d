"""Differentially methylated sites and regions, and ECDF export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .model import FittedModel, Variant


@dataclass(frozen=True)
class DmrRegion:
    chromosome: str
    start: int
    end: int
    site_count: int
    cpg_ids: tuple


def state_changing_clusters(labels) -> np.ndarray:
    """(K,) mask of clusters whose state label differs between samples."""
    labels = np.asarray(labels, dtype=object)
    if labels.ndim != 2:
        raise ConfigError("labels must be a (K, R) array of state names")
    return np.array([len(set(row)) > 1 for row in labels], dtype=bool)


def identify_dmcs(fitted: FittedModel, labels):
    """Flag sites whose most probable cluster changes state across samples.

    Returns ``(is_dmc, cluster)`` arrays over sites.
    """
    if fitted.spec.variant is not Variant.K_DOT_R:
        raise ConfigError("DMC identification needs a k.r model")
    labels = np.asarray(labels, dtype=object)
    if labels.shape != (fitted.K, fitted.R):
        raise ConfigError(f"labels must be ({fitted.K}, {fitted.R}), got {labels.shape}")
    cluster = fitted.hard_labels()
    changing = state_changing_clusters(labels)
    return changing[cluster], cluster


def dmc_fraction(fitted: FittedModel, labels) -> float:
    """Sum of mixing proportions over state-changing clusters."""
    return float(np.asarray(fitted.tau)[state_changing_clusters(labels)].sum())


def map_dmrs(dmc_flags, chromosomes, positions, cpg_ids=None, min_run: int = 3) -> list:
    """Maximal runs of at least ``min_run`` consecutive flagged sites.

    Sites must be grouped by chromosome and sorted by position within each
    group; adjacency means consecutive rows, not a base-pair window.
    """
    flags = np.asarray(dmc_flags, dtype=bool)
    positions = np.asarray(positions, dtype=np.int64)
    chromosomes = [str(c) for c in chromosomes]
    n = flags.size
    if positions.shape != (n,) or len(chromosomes) != n:
        raise ConfigError("flags, chromosomes and positions must have equal length")
    if min_run < 1:
        raise ConfigError("min_run must be >= 1")
    ids = [str(i) for i in cpg_ids] if cpg_ids is not None else [str(i) for i in range(n)]

    seen = set()
    for i in range(n):
        if i == 0 or chromosomes[i] != chromosomes[i - 1]:
            if chromosomes[i] in seen:
                raise ConfigError(f"chromosome {chromosomes[i]} appears in more than one block; sort the sites")
            seen.add(chromosomes[i])
        elif positions[i] < positions[i - 1]:
            raise ConfigError(f"positions not sorted on chromosome {chromosomes[i]} at row {i}")

    regions = []
    start = None
    for i in range(n + 1):
        boundary = i == n or not flags[i] or (start is not None and chromosomes[i] != chromosomes[start])
        if start is not None and boundary:
            if i - start >= min_run:
                regions.append(DmrRegion(chromosomes[start], int(positions[start]), int(positions[i - 1]),
                                         i - start, tuple(ids[start:i])))
            start = None
        if i < n and flags[i] and start is None:
            start = i
    return regions


def ecdf(values) -> list:
    """Step points (x, F(x)) at each distinct value; F(max) = 1."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise DomainError("ECDF of an empty sample")
    xs, counts = np.unique(v, return_counts=True)
    cum = np.cumsum(counts) / v.size
    cum[-1] = 1.0
    return list(zip(xs.tolist(), cum.tolist()))
