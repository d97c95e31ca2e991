"""Exception types shared across the toolkit.

The CLI maps each class to a distinct exit status, so new error conditions
should reuse one of these rather than raising bare ValueError at the surface.
"""


class BurstplanError(Exception):
    """Base class for all toolkit errors."""


class GraphFormatError(BurstplanError):
    """Input file is malformed or violates a structural invariant."""


class MissingProfileError(GraphFormatError):
    """A required layer cost profile entry is absent and interpolation is off."""


class UnsupportedTopologyError(BurstplanError):
    """Graph is not reducible to a chain of branch/join blocks."""

    def __init__(self, message, layers=()):
        super().__init__(message)
        self.layers = tuple(layers)


class InfeasiblePlanError(BurstplanError):
    """No GPU assignment satisfies the planner's preconditions."""


class CurveDomainError(BurstplanError):
    """A batch size falls outside the sample-efficiency curve's domain."""


class DeadlockError(BurstplanError):
    """Simulator made no progress while work remained queued."""

    def __init__(self, message, snapshot=""):
        super().__init__(message)
        self.snapshot = snapshot
