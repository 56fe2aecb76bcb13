"""Exception hierarchy.

Every error carries a stable ``code`` string so that callers (and the CLI)
can dispatch on the failure kind without depending on class identity.
"""


class LetkfLabError(Exception):
    code = "LetkfLabError"


class EmptyEnsembleError(LetkfLabError):
    code = "EmptyEnsemble"


class DegenerateEnsembleError(LetkfLabError):
    code = "DegenerateEnsemble"


class IndexOutOfBoundsError(LetkfLabError, IndexError):
    code = "IndexOutOfBounds"


class InvalidLevelError(LetkfLabError, ValueError):
    code = "InvalidLevel"


class GridTooSmallError(LetkfLabError, ValueError):
    code = "GridTooSmall"


class GridMismatchError(LetkfLabError, ValueError):
    code = "GridMismatch"


class NonFiniteStateError(LetkfLabError, FloatingPointError):
    code = "NonFiniteState"

    def __init__(self, message, member=None):
        super().__init__(message)
        self.member = member


class ModelBlewUpError(LetkfLabError):
    code = "ModelBlewUp"

    def __init__(self, message, cycle):
        super().__init__(message)
        self.cycle = cycle


class TooManyStationsError(LetkfLabError, ValueError):
    code = "TooManyStations"


class InvalidDistanceError(LetkfLabError, ValueError):
    code = "InvalidDistance"


class NotPSDError(LetkfLabError, ValueError):
    code = "NotPSD"


class SingularEnsembleSpaceError(LetkfLabError):
    code = "SingularEnsembleSpace"


class AnalysisBlewUpError(LetkfLabError):
    code = "AnalysisBlewUp"

    def __init__(self, message, column=None, cycle=None):
        super().__init__(message)
        self.column = column
        self.cycle = cycle


class ZeroSpreadError(LetkfLabError):
    code = "ZeroSpread"


class ShapeMismatchError(LetkfLabError, ValueError):
    code = "ShapeMismatch"


class TimeMismatchError(LetkfLabError, ValueError):
    code = "TimeMismatch"


class MissingInputError(LetkfLabError, FileNotFoundError):
    code = "MissingInput"


class NoDataError(LetkfLabError):
    code = "NoData"


class ConfigError(LetkfLabError, ValueError):
    code = "ConfigError"
