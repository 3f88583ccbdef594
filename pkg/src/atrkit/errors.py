"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct exit codes: usage (2), config (3),
I/O / format (4), contract violation (5).
"""


class AtrError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(AtrError):
    """Invalid or inconsistent configuration values."""


class VolumeFormatError(AtrError):
    """Malformed BVOX file: bad magic, truncated payload, absurd dims."""


class ContractError(AtrError):
    """An operation was called with inputs violating its preconditions."""


class VolumeShapeError(ContractError):
    """Two volumes that must share dims/spacing do not."""


class LabelNotFoundError(ContractError):
    """A requested object label is absent from the label volume."""


class DomainError(ContractError):
    """A numeric parameter is outside its mathematical domain."""


class TrainingError(ContractError):
    """Classifier training received degenerate data."""


class EvaluationError(ContractError):
    """Evaluation is undefined for the given inputs (e.g. zero threats)."""


class PlacementError(AtrError):
    """Phantom generation could not place an object after bounded retries."""
