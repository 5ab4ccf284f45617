"""Exception hierarchy shared across tooldriver modules."""

from __future__ import annotations


class ToolDriverError(Exception):
    """Base class for all tooldriver errors."""


class ManifestError(ToolDriverError):
    """Manifest document cannot be parsed; message names the offending line."""


class FieldError(ManifestError):
    """A required manifest field is missing or has the wrong shape."""


class InvariantError(ToolDriverError):
    """A task specification violates a type invariant."""


class UnknownProfileError(InvariantError):
    """The referenced evidence profile is not registered."""


class WorkspaceError(ToolDriverError):
    """A file path escapes the workspace or the workspace is unusable."""


class EngineError(ToolDriverError):
    """Base class for container-engine trouble."""


class EngineUnavailableError(EngineError):
    """The container engine binary or daemon cannot be reached."""


class ImageNotFoundError(EngineError):
    """A referenced image tag does not exist."""


class ContainerDiedError(EngineError):
    """The container stopped while the task still needed it."""


class InvalidHandleError(EngineError):
    """A command was issued against a container handle that is not alive."""


class EngineScriptError(ToolDriverError):
    """A scripted engine was driven off its recorded script (fixture bug,
    never retried)."""


class BackendError(ToolDriverError):
    """LLM transport failed after bounded retries."""


class BudgetExceededError(ToolDriverError):
    """The cost ledger is at or over its cap; the exchange was refused."""


class ReplayMismatchError(ToolDriverError):
    """A replayed request diverged from the recorded archive."""


class StatError(ToolDriverError):
    """A statistical test is undefined for the given inputs."""


#: Engine failures that consume a retry (fresh container, shared budget).
#: EngineScriptError and ReplayMismatchError stay outside EngineError on
#: purpose: a diverged fixture or archive must fail loudly, never retry.
RETRYABLE_ENGINE_ERRORS = (EngineError,)
