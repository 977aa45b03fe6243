"""Exception hierarchy shared by all modules.

Each error carries a machine-readable ``kind`` string and the exit code the
command-line layer should use when the error escapes to the top level.
"""


class PromptRelError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"
    exit_code = 1


class UsageError(PromptRelError):
    """Bad invocation: missing arguments, unknown modes, absent files."""

    kind = "usage"
    exit_code = 2


class InputError(PromptRelError):
    """An input file could not be read."""

    kind = "io"
    exit_code = 2


class FormatError(PromptRelError):
    """An input file was readable but structurally malformed."""

    kind = "format"
    exit_code = 3


class CorruptionError(FormatError):
    """A binary artifact failed its integrity check."""

    kind = "corruption"
    exit_code = 3


class ValidationError(PromptRelError):
    """Well-formed input violating a documented invariant or precondition."""

    kind = "validation"
    exit_code = 3


class BackendError(PromptRelError):
    """The embedding backend failed or refused an input."""

    kind = "backend"
    exit_code = 4


class PromptTooLongError(BackendError):
    """A rendered prompt exceeds the backend's maximum sequence length.

    Carries the ids of every failing instance so callers can report or
    exclude them in one pass instead of failing on the first.
    """

    kind = "backend"
    exit_code = 4

    def __init__(self, instance_ids, limit=None):
        self.instance_ids = list(instance_ids)
        self.limit = limit
        shown = ", ".join(self.instance_ids[:5])
        if len(self.instance_ids) > 5:
            shown += ", ..."
        detail = f" (limit {limit} tokens)" if limit is not None else ""
        super().__init__(
            f"{len(self.instance_ids)} prompt(s) exceed the backend maximum "
            f"length{detail}: {shown}"
        )
