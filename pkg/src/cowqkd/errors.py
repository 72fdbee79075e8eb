"""Exception hierarchy shared by every stage of the pipeline."""


class CowQkdError(Exception):
    """Base class for all package errors."""


class DomainError(CowQkdError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(CowQkdError, ValueError):
    """Invalid or unsupported configuration."""


class CalibrationError(CowQkdError):
    """A calibration target cannot be met by any admissible parameter."""


class ProtocolError(CowQkdError):
    """Two parties' data disagree in a way the protocol forbids."""


class NumericalIntegrityError(CowQkdError):
    """A floating-point fast path lost exactness."""


class WireDecodeError(ProtocolError):
    """A byte frame failed magic, length, or CRC validation."""


class SessionAbort(CowQkdError):
    """A key-distribution session terminated without a key.

    ``reason`` is a short machine-readable token such as ``"qber_exceeded"``
    or ``"transport"``.
    """

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)
