"""Exception hierarchy shared by every betamix module."""


class BetaMixError(Exception):
    """Base class for all betamix errors."""


class DomainError(BetaMixError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class InfeasibleMomentsError(DomainError):
    """Mean/variance pair that no beta distribution can produce."""


class ConfigError(BetaMixError, ValueError):
    """Model specification, data shape or configuration mismatch."""


class DegenerateStatsError(BetaMixError, ArithmeticError):
    """Sufficient statistics for which the closed-form update is undefined."""


class FitError(BetaMixError, RuntimeError):
    """The EM loop could not produce a usable fit."""


class ThresholdUndefinedError(BetaMixError, ValueError):
    """No density-ratio crossing exists for the requested boundary."""


class ModelFormatError(BetaMixError, ValueError):
    """A persisted model file is malformed, truncated or of unknown version."""


class CapabilityError(BetaMixError, RuntimeError):
    """The object lacks the data needed for the requested operation."""
