"""Exception hierarchy shared by the client agent, edge server and checkpoint runtime."""

from __future__ import annotations


class PMCOError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameter(PMCOError, ValueError):
    pass


# registry


class RegistryError(PMCOError):
    pass


class RegistryNotFound(RegistryError, FileNotFoundError):
    pass


class RegistryParseError(RegistryError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class InvariantViolation(RegistryError, ValueError):
    pass


# checkpoint runtime


class CheckpointError(PMCOError):
    pass


class UnknownTask(CheckpointError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class SpawnFailure(CheckpointError):
    pass


class DigestMismatch(CheckpointError):
    pass


class VersionUnsupported(CheckpointError):
    pass


class ImageFormatError(CheckpointError):
    pass


class RestoreFailure(CheckpointError):
    pass


class WorkerCrash(CheckpointError):
    def __init__(self, message: str, exitcode: int | None = None, diagnostics: str = ""):
        self.exitcode = exitcode
        self.diagnostics = diagnostics
        super().__init__(message)


class WorkerUnresponsive(CheckpointError):
    pass


class InvalidTaskState(CheckpointError):
    """Operation not permitted in the handle's current status."""


class AlreadyCheckpointed(InvalidTaskState):
    pass


class TaskFinishedFirst(CheckpointError):
    """The worker completed before it could honor a checkpoint request."""

    def __init__(self, result: bytes):
        self.result = result
        super().__init__("task finished before the checkpoint request was served")


# wire protocol


class ProtocolError(PMCOError):
    pass


class ProtocolTimeout(ProtocolError, TimeoutError):
    pass


class ConnectionReset(ProtocolError, ConnectionError):
    pass


class ServerError(ProtocolError):
    """The peer answered with an ERROR frame."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)


class DigestRejected(ServerError):
    pass


class QuotaExceeded(ServerError):
    pass


class AllRejected(ProtocolError):
    def __init__(self, reasons: dict[str, str] | None = None):
        self.reasons = dict(reasons or {})
        detail = ", ".join(f"{k}: {v}" for k, v in self.reasons.items()) or "no candidates"
        super().__init__(f"no edge server admitted the client ({detail})")


class Unreachable(ProtocolError, ConnectionError):
    pass


class MalformedCSV(PMCOError, ValueError):
    pass
