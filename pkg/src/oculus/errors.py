"""Exception hierarchy. ``exit_code`` maps each family to the CLI exit status."""


class OculusError(Exception):
    exit_code = 1


class ValidationError(OculusError):
    """Bad input: config, question file, parameters, schema violations."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class QuestionSchemaError(ValidationError):
    pass


class BackendError(OculusError):
    """A chat backend failed in a way the caller cannot recover from."""

    exit_code = 2
    retryable = False


class TransportError(BackendError):
    retryable = True


class RateLimitError(TransportError):
    pass


class ScriptError(ValidationError):
    """Scripted backend file is unreadable or malformed."""


class ToolError(OculusError):
    exit_code = 2
    retryable = False


class ModalityMismatch(ToolError):
    pass


class ToolTimeout(ToolError):
    retryable = True


class ToolSchemaError(ToolError):
    """A payload violates the invariants of its output variant."""

    def __init__(self, tool_id: str, invariant: str, payload=None):
        super().__init__(f"{tool_id}: {invariant}")
        self.tool_id = tool_id
        self.invariant = invariant
        self.payload = payload


class ImageDecodeError(ToolError):
    pass


class RetrievalError(OculusError):
    exit_code = 1


class EmbedderError(RetrievalError):
    exit_code = 2


class PlanningError(BackendError):
    """Planner produced no acceptable workflow after the re-ask."""


class IntegrityError(OculusError):
    exit_code = 3
