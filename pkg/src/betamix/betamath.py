"""Special functions and beta-distribution primitives.

Everything here accepts scalars or numpy arrays and returns the same kind.
The log-gamma, digamma and trigamma routines are self-contained so the
exact-digamma M-step oracle does not lean on the library it is checked
against in the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InfeasibleMomentsError

CLAMP_EPS = 1e-6

# Lanczos-type series, g = 671/128, 14 terms (Numerical Recipes 3rd ed.).
_LANCZOS_G = 5.24218750000000000
_LANCZOS_C0 = 0.999999999999997092
_LANCZOS_COEF = (
    57.1562356658629235,
    -59.5979603554754912,
    14.1360979747417471,
    -0.491913816097620199,
    0.339946499848118887e-4,
    0.465236289270485756e-4,
    -0.983744753048795646e-4,
    0.158088703224912494e-3,
    -0.210264441724104883e-3,
    0.217439618115212643e-3,
    -0.164318106536763890e-3,
    0.844182239838527433e-4,
    -0.261908384015814087e-4,
    0.368991826595316234e-5,
)
_SQRT_2PI = 2.5066282746310005

# Asymptotic shift point for the polygamma series.
_ASYMPTOTIC_MIN = 10.0


@dataclass(frozen=True)
class ShapePair:
    """Shape parameters (alpha, delta) of a single beta distribution."""

    alpha: float
    delta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.delta > 0):
            raise DomainError(f"beta shapes must be positive, got ({self.alpha}, {self.delta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.delta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.delta
        return self.alpha * self.delta / (s * s * (s + 1.0))

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def _positive(name, y, bound=0.0):
    y = np.asarray(y, dtype=float)
    if not np.all(y > bound):
        raise DomainError(f"{name} requires arguments > {bound:g}")
    return y


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def log_gamma(x):
    """Natural log of the gamma function for x > 0."""
    x = _positive("log_gamma", x)
    tmp = x + _LANCZOS_G
    tmp = (x + 0.5) * np.log(tmp) - tmp
    ser = np.full_like(x, _LANCZOS_C0)
    y = x.copy()
    for c in _LANCZOS_COEF:
        y = y + 1.0
        ser = ser + c / y
    return _out(tmp + np.log(_SQRT_2PI * ser / x))


def log_beta_fn(alpha, delta):
    """log B(alpha, delta) computed through log-gamma."""
    alpha = _positive("log_beta_fn", alpha)
    delta = _positive("log_beta_fn", delta)
    return _out(
        np.asarray(log_gamma(alpha)) + np.asarray(log_gamma(delta)) - np.asarray(log_gamma(alpha + delta))
    )


def clamp(x, eps: float = CLAMP_EPS):
    """Clamp beta values into [eps, 1 - eps]."""
    return np.clip(x, eps, 1.0 - eps)


def beta_log_pdf(x, shape: ShapePair):
    """Log density of Beta(shape.alpha, shape.delta) at x in (0, 1)."""
    x = np.asarray(x, dtype=float)
    if not np.all((x > 0.0) & (x < 1.0)):
        raise DomainError("beta_log_pdf requires 0 < x < 1")
    a, d = shape.alpha, shape.delta
    return _out((a - 1.0) * np.log(x) + (d - 1.0) * np.log1p(-x) - log_beta_fn(a, d))


def digamma_lb(y):
    """The lower bound log(y - 1/2) of the digamma function, for y > 1/2."""
    y = _positive("digamma_lb", y, 0.5)
    return _out(np.log(y - 0.5))


def digamma_exact(y):
    """Digamma to ~1e-14 via upward recurrence and an asymptotic series."""
    y = _positive("digamma_exact", y).copy()
    shift = np.zeros_like(y)
    small = y < _ASYMPTOTIC_MIN
    while np.any(small):
        shift[small] -= 1.0 / y[small]
        y[small] += 1.0
        small = y < _ASYMPTOTIC_MIN
    inv2 = 1.0 / (y * y)
    # Bernoulli terms B_2k / (2k y^2k), k = 1..7
    series = inv2 * (
        1.0 / 12
        - inv2 * (1.0 / 120
        - inv2 * (1.0 / 252
        - inv2 * (1.0 / 240
        - inv2 * (1.0 / 132
        - inv2 * (691.0 / 32760
        - inv2 * (1.0 / 12)))))))
    return _out(np.log(y) - 0.5 / y - series + shift)


def trigamma_exact(y):
    """Trigamma (derivative of digamma), same recurrence/series scheme."""
    y = _positive("trigamma_exact", y).copy()
    shift = np.zeros_like(y)
    small = y < _ASYMPTOTIC_MIN
    while np.any(small):
        shift[small] += 1.0 / (y[small] * y[small])
        y[small] += 1.0
        small = y < _ASYMPTOTIC_MIN
    inv = 1.0 / y
    inv2 = inv * inv
    series = inv * inv2 * (
        1.0 / 6
        - inv2 * (1.0 / 30
        - inv2 * (1.0 / 42
        - inv2 * (1.0 / 30
        - inv2 * (5.0 / 66
        - inv2 * (691.0 / 2730
        - inv2 * (7.0 / 6)))))))
    return _out(inv + 0.5 * inv2 + series + shift)


def mom_estimate(mean: float, variance: float) -> ShapePair:
    """Invert beta mean and variance into shape parameters."""
    if not 0.0 < mean < 1.0:
        raise DomainError(f"mean must lie in (0, 1), got {mean}")
    if not variance > 0.0:
        raise DomainError(f"variance must be positive, got {variance}")
    spread = mean * (1.0 - mean)
    if variance >= spread:
        raise InfeasibleMomentsError(
            f"variance {variance:g} >= mean*(1-mean) = {spread:g}; no beta distribution matches"
        )
    common = spread / variance - 1.0
    return ShapePair(mean * common, (1.0 - mean) * common)
