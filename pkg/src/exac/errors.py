"""Exception taxonomy shared across the pipeline.

Everything raised on purpose derives from ExacError so callers (and the
CLI exit-code mapping) can catch one base for operational failures.
"""

from __future__ import annotations


class ExacError(Exception):
    """Base class for every intentional error in this package."""


class SchemaError(ExacError):
    """A document has an unknown field, a missing field, or a wrong type."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class InvariantError(ExacError):
    """Structurally valid input violates a semantic rule."""


class DecodeError(ExacError):
    """A wire message failed validation; `path` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class ConflictError(ExacError):
    """Contradictory resend: same identity, different bytes."""


class ChunkConflictError(ConflictError):
    """A chunk sequence number was resent with different bytes."""

    def __init__(self, seq: int):
        super().__init__(f"chunk seq {seq} resent with different bytes")
        self.seq = seq


class UnknownSessionError(ExacError):
    """Operation referenced a session the service has never seen."""


class NotReadyError(ExacError):
    """Export requested for a trial that is not reconstructed yet."""


class IncompleteError(ExacError):
    """Reconstruction attempted before the tail message arrived."""


class EmptySaltError(ExacError):
    """Completion codes require a non-empty salt."""


class DuplicateParticipantError(ExacError):
    """A participant id was assigned a treatment twice."""


class DegenerateDesignError(ExacError):
    """Model fit attempted on a design without enough groups."""


class NotConvergedError(ExacError):
    """Variance-ratio search exhausted its bracket."""


class StateCorruptError(ExacError):
    """Lifecycle state file is unreadable or violates its invariants."""


class StateLockError(ExacError):
    """Another process holds the lifecycle state lock."""


class ExecutorError(ExacError):
    """A lifecycle action failed; `index` is its position in the plan."""

    def __init__(self, index: int, action: str, cause: BaseException):
        super().__init__(f"action {index} ({action}) failed: {cause}")
        self.index = index
        self.action = action
        self.cause = cause


class UnreachableError(ExacError):
    """A simulated walk target cannot be reached from the origin."""


class TransportError(ExacError):
    """A client could not reach the service (connect/timeout/5xx)."""


class UsageError(ExacError):
    """Command line could not be parsed; maps to exit code 2."""


class ClientError(ExacError):
    """The recruitment platform rejected a request."""


class ParseError(ExacError):
    """A CSV input for analysis was malformed."""

    def __init__(self, message: str, source: str = "", line: int = 0):
        where = f"{source}:{line}" if source else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line
