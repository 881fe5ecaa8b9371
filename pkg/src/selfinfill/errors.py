"""Exception types shared across the package."""


class SelfInfillError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SelfInfillError):
    """An argument violates a documented precondition."""


class BackendUnavailableError(SelfInfillError):
    """A backend could not be reached (network failure, timeout)."""


class ProtocolViolationError(SelfInfillError):
    """A remote backend answered with a malformed or invalid payload."""


class ContextOverflowError(SelfInfillError):
    """A context exceeds the backend's maximum length."""


class MalformedTraceError(SelfInfillError):
    """A raw token sequence does not conform to the sentinel grammar."""


class MalformedStateError(SelfInfillError):
    """Loop state violates an invariant (e.g. prefix lost the prompt)."""


class ExtractionError(SelfInfillError):
    """A suffix-prompt rule could not extract its target from the problem text."""


class LoopAbortedError(SelfInfillError):
    """A backend failure ended a loop run; carries the partial loop state."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state
