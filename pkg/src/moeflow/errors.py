"""Exception hierarchy shared across the package.

Validation problems (bad specs, bad configs, shape mismatches) and numerical
problems (non-finite values, divergence, starved estimators) are kept on
separate branches so the CLI can map them to distinct exit codes.
"""


class MoeflowError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(MoeflowError):
    """Caller passed something structurally wrong (bad shapes, bad config)."""


class InvalidSpecError(ValidationError):
    """Mixture specification violates its invariants."""


class UnsupportedSpecError(ValidationError):
    """Operation is not defined for this kind of mixture spec."""


class DimensionMismatchError(ValidationError):
    """Array dimensions disagree with what the model or op expects."""


class ConfigError(ValidationError):
    """Run configuration file or CLI flags failed validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class CheckpointFormatError(ValidationError):
    """Checkpoint bytes do not parse as a known format/version."""


class NumericalError(MoeflowError):
    """Computation produced values we refuse to continue with."""


class NonFiniteError(NumericalError):
    """NaN or inf appeared mid-computation.

    `where` names the offending location (layer index, row index, ...).
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class DivergenceError(NumericalError):
    """Training loss went non-finite.

    Carries the failing step and the last finite parameter snapshot so a
    caller can persist partial state.
    """

    def __init__(self, message, step, last_finite=None):
        super().__init__(message)
        self.step = step
        self.last_finite = last_finite


class IntegrationError(NumericalError):
    """ODE state became non-finite during integration."""

    def __init__(self, message, step=None, sample_indices=None):
        super().__init__(message)
        self.step = step
        self.sample_indices = sample_indices or []


class EffectiveSampleSizeError(NumericalError):
    """Importance-weighted estimate is too degenerate to trust."""

    def __init__(self, message, ess):
        super().__init__(message)
        self.ess = ess
