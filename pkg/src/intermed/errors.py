"""Exception hierarchy shared by all modules."""


class MediationError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(MediationError, ValueError):
    """Variable roles are inconsistent or incomplete."""


class DataError(MediationError, ValueError):
    """Observed data violate the declared schema."""


class GlmError(MediationError):
    """A regression fit could not be completed."""


class RankDeficientError(GlmError):
    pass


class SeparationError(GlmError):
    pass


class MediatorModelError(MediationError):
    """A mediator model failed to fit or to evaluate."""


class UnsupportedStructureError(MediatorModelError):
    """Closed-form marginalization requested for a chain that does not admit it."""


class UnstableWeightsError(MediationError):
    pass


class EstimationError(MediationError):
    pass


class ConfigError(MediationError, ValueError):
    """A run configuration is malformed; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
