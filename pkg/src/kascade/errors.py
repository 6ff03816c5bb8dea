"""Exception taxonomy shared by every module.

The CLI maps these onto its exit-code contract: usage errors exit 1,
data/format errors exit 2, threshold failures exit 3.
"""


class KascadeError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(KascadeError):
    """A caller-supplied value violates an operation's preconditions."""


class NumericError(KascadeError):
    """A non-finite value appeared mid-computation."""

    def __init__(self, message, layer=None, head=None, row=None):
        loc = ", ".join(
            f"{name}={val}"
            for name, val in (("layer", layer), ("head", head), ("row", row))
            if val is not None
        )
        super().__init__(f"{message} ({loc})" if loc else message)
        self.layer = layer
        self.head = head
        self.row = row


class UndefinedScoreError(KascadeError):
    """A similarity score has a zero denominator; excluded from aggregates."""


class UnsupportedOperationError(KascadeError):
    """The requested operation is not available for this input."""


class FormatError(KascadeError):
    """A serialized file violates its schema.

    ``offset`` is the byte offset for binary files; ``field_path`` the
    JSON path for structured text files. Either may be None.
    """

    def __init__(self, message, offset=None, field_path=None):
        detail = message
        if offset is not None:
            detail = f"{detail} (byte offset {offset})"
        if field_path is not None:
            detail = f"{detail} (at {field_path})"
        super().__init__(detail)
        self.offset = offset
        self.field_path = field_path


class InvalidPlanError(KascadeError):
    """An anchor plan is inconsistent with itself or with a trace."""
