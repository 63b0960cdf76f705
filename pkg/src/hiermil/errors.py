"""Exception taxonomy shared by every hiermil module.

Callers can catch :class:`HiermilError` to handle any library failure, or a
specific subclass when the failure mode matters (the volume container and
checkpoint readers in particular raise distinct classes for distinct kinds
of file damage).
"""


class HiermilError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolationError(HiermilError):
    """An argument broke a documented shape/length/identity contract."""


class InvalidInputError(HiermilError):
    """Input values are outside the operation's domain (non-finite, bad label, ...)."""


class ConfigurationError(HiermilError):
    """A config object is internally inconsistent or unsatisfiable."""


class NumericFailureError(HiermilError):
    """A non-finite value appeared where the math guarantees finiteness.

    ``detail`` names the offending parameter / epoch / volume when known.
    """

    def __init__(self, message: str, detail: str | None = None):
        super().__init__(message if detail is None else f"{message} ({detail})")
        self.detail = detail


class SamplingError(HiermilError):
    """A volume cannot satisfy a sub-bag sampling request."""

    def __init__(self, message: str, volume_id: str | None = None):
        super().__init__(message)
        self.volume_id = volume_id


class UndefinedMetricError(HiermilError):
    """A metric is undefined on the given inputs (e.g. single-class AUROC)."""


class NotFoundError(HiermilError):
    """A requested id or path does not exist."""


# --- volume container I/O ---------------------------------------------------

class VolumeIOError(HiermilError):
    """Base for volume container read failures."""


class VolumeHeaderError(VolumeIOError):
    """Header file is malformed or missing required keys."""


class PayloadTruncatedError(VolumeIOError):
    """Payload file is shorter than the header promises."""


class PayloadMismatchError(VolumeIOError):
    """Header dims and payload size disagree (payload longer than promised)."""


class ChecksumMismatchError(VolumeIOError):
    """Payload bytes do not hash to the header's checksum."""


# --- checkpoint I/O ---------------------------------------------------------

class CheckpointError(HiermilError):
    """Base for checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint header is malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class CheckpointDigestError(CheckpointError):
    """Checkpoint tensor blob does not match its recorded digest."""


class DescriptorMismatchError(CheckpointError):
    """Checkpoint architecture descriptor is incompatible with the target model."""
