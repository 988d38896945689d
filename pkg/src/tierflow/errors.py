"""Exception hierarchy."""


class TierflowError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TierflowError):
    pass


class ProbeError(TierflowError):
    """Bandwidth probe could not run against the tier."""


class TierIOError(TierflowError):
    """An I/O operation on a tier failed; ``tier_id`` identifies the tier."""

    def __init__(self, tier_id: int, message: str):
        super().__init__(f"tier {tier_id}: {message}")
        self.tier_id = tier_id


class PlacementInconsistencyError(TierIOError):
    """A subgroup was expected on a tier but is not there."""


class FormatError(TierIOError):
    """A subgroup file has a bad header or size."""


class InvalidBandwidthError(TierflowError, ValueError):
    pass


class GradientOverflowError(TierflowError, FloatingPointError):
    """Gradient buffer holds NaN or Inf; the caller should skip the step."""


class SchedulingError(TierflowError):
    """The update pipeline stopped making progress."""


class CancelledError(TierflowError):
    """A queued I/O operation was cancelled by a shutdown."""
