"""Exception hierarchy shared by every stage.

Each class carries the CLI exit code it maps to: 2 for bad configuration,
3 for bad input data, 4 for numerical failure.
"""


class ExposureError(Exception):
    exit_code = 1


class ConfigError(ExposureError):
    exit_code = 2


class InputDataError(ExposureError):
    exit_code = 3


class NumericalError(ExposureError):
    exit_code = 4


# configuration
class MissingInput(ConfigError):
    pass


class BadConfig(ConfigError):
    pass


class GridTooLarge(ConfigError):
    pass


class BadK(ConfigError):
    pass


# input data
class InvalidGeometry(InputDataError):
    pass


class MissingHeader(InputDataError):
    pass


class IoFailure(InputDataError):
    pass


class SpecMismatch(InputDataError):
    pass


class EmptyZone(InputDataError):
    pass


class EmptyWindow(InputDataError):
    pass


class NoOverlap(InputDataError):
    pass


class DegenerateInput(InputDataError):
    pass


class EmptyCluster(InputDataError):
    pass


class DegenerateGroup(InputDataError):
    pass


class InsufficientRows(InputDataError):
    pass


# numerical
class RankDeficient(NumericalError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ZeroVariance(NumericalError):
    pass
