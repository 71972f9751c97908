"""Exception types shared across the package."""


class SeeGroundError(Exception):
    """Base class for every error raised by this package."""


class PlyError(SeeGroundError):
    """Malformed or unsupported PLY input, annotated with the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DetectionError(SeeGroundError):
    """Invalid detection or object-table file contents."""


class UnknownObjectId(SeeGroundError):
    """Lookup of an object id that is not in the table."""


class EmptyCropError(SeeGroundError):
    """A crop operation would discard every point."""


class DegenerateUp(SeeGroundError):
    """Viewing direction is parallel to the requested up vector."""


class BehindCamera(SeeGroundError):
    """Point is not in front of the camera.

    This is an expected filter outcome during projection, not a fault.
    """


class TargetNotInScene(SeeGroundError):
    """No detected object matches the query's target class."""


class EmptyObjectError(SeeGroundError):
    """An object record resolves to zero scene points."""


class AgentError(SeeGroundError):
    """Base class for agent-boundary failures."""


class ReplyParseError(AgentError):
    """Backend reply did not match the expected grammar, even after a reprompt."""


class TransportError(AgentError):
    """The remote endpoint could not be reached or returned an error."""

    def __init__(self, message: str, retries: int = 0):
        super().__init__(f"{message} (after {retries} retries)" if retries else message)
        self.retries = retries


class EvalError(SeeGroundError):
    """Inconsistent benchmark or result inputs during evaluation."""
