"""Exception hierarchy shared by the estimator, detector, simulator and CLI."""


class RidsError(Exception):
    """Base class for every error raised by this package."""


class InvalidAlpha(RidsError, ValueError):
    """Significance level outside the open interval (0, 1)."""


class NotPsd(RidsError, ValueError):
    """Covariance has a materially negative eigenvalue."""


class DimensionMismatch(RidsError, ValueError):
    """Vector or matrix shapes do not agree."""


class GimbalSingularity(RidsError, ValueError):
    """UAV pitch too close to +-pi/2 for the Euler-angle rate matrix."""


class ModeInadmissible(RidsError):
    """The mode's reference sensors cannot identify the actuator attack."""


class SingularInnovationCov(RidsError):
    """The innovation covariance used for the state gain is singular."""


class NoAdmissibleMode(RidsError):
    """No sensor (or sensor group) is able to reconstruct the full state."""


class AllModesFailed(RidsError):
    """Every mode raised during one detector iteration."""


class Diverged(RidsError):
    """The simulated robot left the arena by a wide margin."""


class ScenarioError(RidsError, ValueError):
    """Scenario file failed to parse or validate.

    ``field`` names the offending entry using a dotted path.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceFormatError(RidsError, ValueError):
    """Trace file is unreadable, truncated or of an unknown schema."""


class ReplayMismatch(RidsError):
    """Replayed detections differ from the recorded ones."""

    def __init__(self, iteration: int, column: str, recorded: str, replayed: str):
        self.iteration = iteration
        self.column = column
        self.recorded = recorded
        self.replayed = replayed
        super().__init__(
            f"iteration {iteration}: column {column!r} recorded {recorded!r} "
            f"but replay produced {replayed!r}"
        )
