"""Exception hierarchy shared across the package.

Two broad failure classes matter to callers (and map to CLI exit codes):
validation problems in inputs/configuration, and numerical failures at
run time.
"""


class HandkinError(Exception):
    """Base class for all package errors."""


class ValidationError(HandkinError):
    """Bad inputs: malformed config, graph, shapes, or file contents."""


class NumericalError(HandkinError):
    """Runtime numerical failure: non-finite values, degenerate matrices."""


class DegenerateInputError(NumericalError):
    """A matrix was too close to rank-deficient for the requested operation."""


class ProjectionError(NumericalError):
    """A point could not be projected (non-positive camera depth)."""

    def __init__(self, message: str, joint_indices=None):
        super().__init__(message)
        self.joint_indices = list(joint_indices) if joint_indices is not None else []
