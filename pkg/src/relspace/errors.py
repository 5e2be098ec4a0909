"""Exception types shared across the toolkit."""


class RelspaceError(Exception):
    """Base class for all domain errors raised by this package."""


class InvalidInputError(RelspaceError):
    """Malformed argument: bad shape, non-finite values, unknown kind."""


class InvalidSceneError(RelspaceError):
    """A scene that cannot produce a valid descriptor (empty cloud, no valid pairs)."""


class NotFoundError(RelspaceError):
    """Unknown identifier in a database or session."""


class DuplicateIdError(RelspaceError):
    """Identifier already present in a database."""


class ParseError(RelspaceError):
    """A file that does not match its documented format."""


class GenerationError(RelspaceError):
    """The synthetic generator could not realize a requested arrangement."""


class TrainingError(RelspaceError):
    """Metric training cannot proceed (degenerate labels, too few examples)."""


class ProtocolError(RelspaceError):
    """A teaching-session operation called in the wrong state."""


class NoFeasiblePoseError(RelspaceError):
    """Pose search found no collision-free candidate.

    Carries the best infeasible candidate so callers can report how close
    the search came.
    """

    def __init__(self, message, best_infeasible=None, evaluated_samples=0):
        super().__init__(message)
        self.best_infeasible = best_infeasible
        self.evaluated_samples = evaluated_samples
