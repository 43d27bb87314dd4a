"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: data/format problems exit 2, failed
numeric checks exit 3, usage problems exit 1.
"""


class MsamError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MsamError):
    """Operand shapes (or dtypes) are incompatible; message names both."""


class ContractError(MsamError):
    """A documented precondition of an operation was violated."""


class ValidationError(MsamError):
    """Data content is invalid (non-finite values, bad records)."""


class FormatError(MsamError):
    """A byte stream is not a recognized container (bad magic/version)."""


class CorruptionError(FormatError):
    """A container failed its checksum or is truncated."""


class PairingError(MsamError):
    """Ground-truth references between texts and videos are broken."""


class CheckFailure(MsamError):
    """A verification harness (gradient check, acceptance gate) failed."""


class TrainingAborted(MsamError):
    """Training hit a non-finite loss; message carries step and parts."""
