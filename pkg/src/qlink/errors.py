"""Exception hierarchy shared across the simulator."""


class QLinkError(Exception):
    """Base class for all simulator errors."""


class InvalidParameter(QLinkError, ValueError):
    pass


class FitError(QLinkError, ValueError):
    pass


class InsufficientKey(QLinkError):
    """Raised when a key buffer cannot cover a draw; callers count a missed packet."""

    def __init__(self, requested: int, available: int):
        super().__init__(f"requested {requested} key bits, {available} available")
        self.requested = requested
        self.available = available


class AuthenticationFailure(QLinkError):
    pass


class KeyDesyncError(QLinkError):
    pass


class KeyExportForbidden(QLinkError, PermissionError):
    pass


class NoSuchKey(QLinkError, KeyError):
    pass


class AuthorizationDenied(QLinkError, PermissionError):
    pass


class DigestMismatch(QLinkError, ValueError):
    pass


class CertificateRequired(QLinkError, ValueError):
    pass


class DuplicateKey(QLinkError, ValueError):
    pass


class EmptyRegistry(QLinkError):
    pass


class InvalidEvidence(QLinkError, ValueError):
    pass


class NoLocalVerification(QLinkError):
    """An honest validator refused to vote on events it has not verified itself."""


class WatermarkMonotonicity(QLinkError, ValueError):
    pass


class InvalidScenario(QLinkError, ValueError):
    pass


class ConfigError(QLinkError, ValueError):
    pass
