"""Exception hierarchy shared by every module of the laboratory."""


class KFPError(Exception):
    """Base class; ``category`` drives the CLI exit-code mapping."""

    category = "error"


class ConfigError(KFPError):
    category = "config"


class PointNotOnBoundary(KFPError):
    category = "geometry"


class TooCoarse(KFPError):
    category = "geometry"


class NonSymmetricA(KFPError):
    category = "assumption"


class AssumptionViolated(KFPError):
    category = "assumption"


class ExpressionError(ConfigError):
    pass


class SolverError(KFPError):
    category = "solver"


class NotConverged(SolverError):
    def __init__(self, message, history=None, iterate=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.iterate = iterate


class SingularPivot(SolverError):
    pass


class NoProgress(SolverError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class TooManyCensored(SolverError):
    pass


class PreconditionViolated(KFPError):
    category = "check"


class SourceOutside(KFPError):
    category = "geometry"


class NoAdmissibleDelta(KFPError):
    category = "perron"


class NoAdmissibleParameters(KFPError):
    category = "perron"


class MaskMismatch(KFPError):
    category = "perron"
