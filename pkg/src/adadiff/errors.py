"""Exception hierarchy shared across the package."""


class AdaDiffError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AdaDiffError, ValueError):
    """Input data violates a precondition (non-finite coordinates, bad shapes)."""


class InvalidArgumentError(AdaDiffError, ValueError):
    """An argument is outside its allowed range."""


class ConfigurationError(AdaDiffError, ValueError):
    """A configuration value or name is unknown or inconsistent."""


class FormatError(AdaDiffError):
    """A file does not follow its declared on-disk format."""


class DegenerateNeighborhoodError(AdaDiffError):
    """A neighborhood has no spatial extent, so no plane can be fitted."""


class ContractError(AdaDiffError):
    """An internal contract between components was broken (e.g. shape change)."""


class TrainingFailure(AdaDiffError):
    """Training diverged or failed to reach its target."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
