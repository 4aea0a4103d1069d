"""Data model shared by all modules: data matrix, model spec, parameters, fits."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .betamath import CLAMP_EPS
from .errors import CapabilityError, ConfigError

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_MAX_ITERATIONS = 1000


class Variant(str, enum.Enum):
    """The three constraint patterns on the per-(patient, sample) shapes."""

    K_DOT_DOT = "k.."  # shared over patients, R = 1
    KN_DOT = "kn."  # patient specific, R = 1
    K_DOT_R = "k.r"  # sample specific, shared over patients

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("·", ".")
        aliases = {"kdd": "k..", "knd": "kn.", "kdr": "k.r", "k_dot_dot": "k..", "kn_dot": "kn.", "k_dot_r": "k.r"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown model variant {value!r}; expected one of k.., kn., k.r") from None

    def n_blocks(self, N: int, R: int) -> int:
        """Number of free shape blocks per cluster."""
        return {Variant.K_DOT_DOT: 1, Variant.KN_DOT: N, Variant.K_DOT_R: R}[self]

    def block_of_column(self, N: int, R: int) -> np.ndarray:
        """Map flattened column index j = n*R + r to its shape block."""
        n, r = np.divmod(np.arange(N * R), R)
        if self is Variant.K_DOT_DOT:
            return np.zeros(N * R, dtype=np.int64)
        if self is Variant.KN_DOT:
            return n.astype(np.int64)
        return r.astype(np.int64)


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant
    K: int | None = None
    M: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.M < 1:
            raise ConfigError("M must be a positive integer")
        if self.K is not None and self.K < 1:
            raise ConfigError("K must be a positive integer")

    def n_clusters(self, R: int = 1) -> int:
        """K, or the variant default (M for K.. / KN., M**R for K.R)."""
        if self.K is not None:
            return self.K
        if self.variant is Variant.K_DOT_R:
            return self.M**R
        return self.M

    def resolved(self, R: int) -> "ModelSpec":
        return ModelSpec(self.variant, self.n_clusters(R), self.M)


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = DEFAULT_EPSILON
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    seed: int = 0
    n_threads: int | None = None  # None: BETAMIX_THREADS or all cores
    exact_mstep: bool = False
    backend: str | None = None  # None: module default

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must fit in an unsigned 64-bit integer")


class MethylationMatrix:
    """C x N x R beta values, clamped into (0, 1).

    Stored as a (J, C) array of columns, J = N*R and j = n*R + r, so that
    per-column reductions in the EM engine read contiguous memory.
    """

    def __init__(self, values, cpg_ids=None, patient_labels=None, sample_labels=None,
                 chromosomes=None, positions=None, clamp_eps: float = CLAMP_EPS):
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ConfigError(f"values must be C x N x R, got shape {arr.shape}")
        C, N, R = arr.shape
        if min(C, N, R) < 1:
            raise ConfigError(f"empty dimension in shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("values contain NaN or infinite entries")
        if np.any((arr < 0.0) | (arr > 1.0)):
            raise ConfigError("beta values must lie in [0, 1]")
        lo, hi = clamp_eps, 1.0 - clamp_eps
        outside = (arr < lo) | (arr > hi)
        self.n_clamped = int(outside.sum())
        if self.n_clamped:
            log.warning("clamped %d beta values into [%g, %g]", self.n_clamped, lo, hi)
            arr = np.clip(arr, lo, hi)

        self._cols = np.ascontiguousarray(arr.reshape(C, N * R).T)
        self._cols.flags.writeable = False
        self.cpg_ids = _labels(cpg_ids, C, "cg")
        if len(set(self.cpg_ids)) != C:
            raise ConfigError("cpg_ids must be unique")
        self.patient_labels = _labels(patient_labels, N, "")
        self.sample_labels = _labels(sample_labels, R, "")
        if sample_labels is None:
            self.sample_labels = tuple(chr(ord("A") + i) if i < 26 else str(i + 1) for i in range(R))
        if (chromosomes is None) != (positions is None):
            raise ConfigError("chromosomes and positions must be given together")
        if chromosomes is not None:
            chromosomes = tuple(str(c) for c in chromosomes)
            positions = np.asarray(positions, dtype=np.int64)
            if len(chromosomes) != C or positions.shape != (C,):
                raise ConfigError("genomic positions must have one entry per CpG site")
        self.chromosomes = chromosomes
        self.positions = positions
        self._logs = None

    @property
    def shape(self):
        return self.C, self.N, self.R

    @property
    def C(self) -> int:
        return self._cols.shape[1]

    @property
    def N(self) -> int:
        return len(self.patient_labels)

    @property
    def R(self) -> int:
        return len(self.sample_labels)

    @property
    def columns(self) -> np.ndarray:
        """Read-only (J, C) view, column j = n*R + r."""
        return self._cols

    @property
    def values(self) -> np.ndarray:
        """Read-only (C, N, R) view."""
        return self._cols.reshape(self.N, self.R, self.C).transpose(2, 0, 1)

    def column_labels(self) -> list[str]:
        return [f"patient{p}_sample{s}" for p in self.patient_labels for s in self.sample_labels]

    def log_columns(self):
        """Cached (log x, log(1 - x)) column arrays."""
        if self._logs is None:
            lx = np.log(self._cols)
            l1x = np.log1p(-self._cols)
            lx.flags.writeable = False
            l1x.flags.writeable = False
            self._logs = (lx, l1x)
        return self._logs

    def select_sample(self, r) -> "MethylationMatrix":
        """The R = 1 matrix for one sample, by index or label."""
        if not isinstance(r, (int, np.integer)):
            if str(r) not in self.sample_labels:
                raise ConfigError(f"unknown sample {r!r}; have {list(self.sample_labels)}")
            r = self.sample_labels.index(str(r))
        return MethylationMatrix(
            self.values[:, :, r], self.cpg_ids, self.patient_labels, (self.sample_labels[r],),
            self.chromosomes, self.positions,
        )

    def __repr__(self):
        return f"MethylationMatrix(C={self.C}, N={self.N}, R={self.R})"


def _labels(labels, n, prefix):
    if labels is None:
        return tuple(f"{prefix}{i + 1}" for i in range(n))
    labels = tuple(str(s) for s in labels)
    if len(labels) != n:
        raise ConfigError(f"expected {n} labels, got {len(labels)}")
    return labels


class ShapeParams:
    """Shape parameters stored once per free block and broadcast to (K, N, R).

    ``alpha_free``/``delta_free`` have shape (K, B) where B is 1 (K..),
    N (KN.) or R (K.R); tied (k, n, r) entries therefore read the same
    stored value.
    """

    def __init__(self, variant, alpha_free, delta_free, N: int, R: int):
        self.variant = Variant.parse(variant)
        self.N, self.R = int(N), int(R)
        a = np.array(alpha_free, dtype=float, ndmin=2)
        d = np.array(delta_free, dtype=float, ndmin=2)
        B = self.variant.n_blocks(self.N, self.R)
        if a.shape != d.shape or a.shape[1] != B:
            raise ConfigError(f"{self.variant.value} needs (K, {B}) free shapes, got {a.shape} / {d.shape}")
        if not (np.all(a > 0) and np.all(d > 0)):
            raise ConfigError("shape parameters must be positive")
        self.alpha_free = a
        self.delta_free = d

    @property
    def K(self) -> int:
        return self.alpha_free.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.alpha_free.shape[1]

    def block_of_column(self) -> np.ndarray:
        return self.variant.block_of_column(self.N, self.R)

    def per_column(self):
        """(alpha, delta) expanded to (K, J) with j = n*R + r."""
        b = self.block_of_column()
        return self.alpha_free[:, b], self.delta_free[:, b]

    @property
    def alpha(self) -> np.ndarray:
        return self.per_column()[0].reshape(self.K, self.N, self.R)

    @property
    def delta(self) -> np.ndarray:
        return self.per_column()[1].reshape(self.K, self.N, self.R)

    def block_index(self, n: int, r: int) -> int:
        return int(self.block_of_column()[n * self.R + r])

    def means(self) -> np.ndarray:
        """Fitted means alpha / (alpha + delta) per (cluster, block)."""
        return self.alpha_free / (self.alpha_free + self.delta_free)

    def permuted(self, order) -> "ShapeParams":
        return ShapeParams(self.variant, self.alpha_free[order], self.delta_free[order], self.N, self.R)

    def copy(self) -> "ShapeParams":
        return ShapeParams(self.variant, self.alpha_free.copy(), self.delta_free.copy(), self.N, self.R)

    def __eq__(self, other):
        return (isinstance(other, ShapeParams) and self.variant is other.variant
                and (self.N, self.R) == (other.N, other.R)
                and np.array_equal(self.alpha_free, other.alpha_free)
                and np.array_equal(self.delta_free, other.delta_free))

    def __repr__(self):
        return f"ShapeParams({self.variant.value}, K={self.K}, blocks={self.n_blocks})"


@dataclass(frozen=True, eq=False)
class FittedModel:
    spec: ModelSpec
    tau: np.ndarray
    shapes: ShapeParams
    responsibilities: np.ndarray | None
    loglik_trace: tuple
    converged: bool
    n_iterations: int
    n_sites: int
    patient_labels: tuple = ()
    sample_labels: tuple = ()
    site_ids: tuple | None = None
    degenerate_events: int = 0
    ascent_violations: int = 0
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def K(self) -> int:
        return len(self.tau)

    @property
    def N(self) -> int:
        return self.shapes.N

    @property
    def R(self) -> int:
        return self.shapes.R

    @property
    def has_responsibilities(self) -> bool:
        return self.responsibilities is not None

    def require_responsibilities(self) -> np.ndarray:
        if self.responsibilities is None:
            raise CapabilityError("model was saved without responsibilities; refit or save with them")
        return self.responsibilities

    def hard_labels(self) -> np.ndarray:
        """argmax of each responsibility row; ties go to the lowest index."""
        return np.argmax(self.require_responsibilities(), axis=1)

    def __eq__(self, other):
        if not isinstance(other, FittedModel):
            return NotImplemented
        z_eq = (self.responsibilities is None and other.responsibilities is None) or (
            self.responsibilities is not None and other.responsibilities is not None
            and np.array_equal(self.responsibilities, other.responsibilities))
        return (self.spec == other.spec and np.array_equal(self.tau, other.tau)
                and self.shapes == other.shapes and z_eq
                and tuple(self.loglik_trace) == tuple(other.loglik_trace)
                and self.converged == other.converged and self.n_iterations == other.n_iterations
                and self.n_sites == other.n_sites
                and tuple(self.patient_labels) == tuple(other.patient_labels)
                and tuple(self.sample_labels) == tuple(other.sample_labels)
                and self.site_ids == other.site_ids
                and self.degenerate_events == other.degenerate_events
                and self.ascent_violations == other.ascent_violations
                and self.config == other.config)


def validate(matrix: MethylationMatrix, spec: ModelSpec) -> None:
    """Raise ConfigError unless ``matrix`` can be fitted under ``spec``."""
    C, N, R = matrix.shape
    cols = matrix.columns
    if cols.shape != (N * R, C):
        raise ConfigError(f"column store {cols.shape} disagrees with dimensions {(C, N, R)}")
    if not np.all((cols > 0.0) & (cols < 1.0)):
        raise ConfigError("values must lie strictly inside (0, 1) after clamping")
    variant = spec.variant
    if variant in (Variant.K_DOT_DOT, Variant.KN_DOT) and R != 1:
        raise ConfigError(f"{variant.value} model needs a single sample (R = 1), data has R = {R}")
    if variant is Variant.K_DOT_R and R < 2:
        raise ConfigError(f"k.r model needs R >= 2 samples, data has R = {R}")
    K = spec.n_clusters(R)
    if C < K:
        raise ConfigError(f"need at least K = {K} CpG sites, have {C}")
