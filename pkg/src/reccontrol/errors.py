"""Exception hierarchy shared across modules."""


class RecError(Exception):
    """Base class for all package errors."""


class ParseError(RecError):
    pass


class ValidationError(RecError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class UnknownSource(RecError):
    pass


class StorageError(RecError):
    pass


class EpisodeOver(RecError):
    pass


class ShapeMismatch(RecError):
    pass


class InsufficientData(RecError):
    pass


class EmptyRun(RecError):
    pass


class BaselineZero(RecError):
    pass


class MissingArtifacts(RecError):
    pass


# EV gateway
class GatewayError(RecError):
    pass


class AlreadyLinked(GatewayError):
    pass


class InvalidCode(GatewayError):
    pass


class NonceMismatch(GatewayError):
    pass


class ConsentRefused(GatewayError):
    pass


class RefreshFailed(GatewayError):
    pass


class Unauthorized(GatewayError):
    pass


class NotLinked(GatewayError):
    pass
