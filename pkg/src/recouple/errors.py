"""Exception hierarchy.

Each class carries the process exit code used by the command-line front end.
"""


class RecoupleError(Exception):
    exit_code = 1


class ConfigError(RecoupleError):
    exit_code = 2


class StructureError(ConfigError):
    """Invalid parental structure, factor layout or series set."""


class InputError(RecoupleError):
    """Bad data values (non-finite, negative counts, unknown nodes, ...)."""

    exit_code = 3


class NumericError(RecoupleError):
    exit_code = 4


class DimensionError(NumericError):
    pass


class DegenerateForecastError(NumericError):
    pass


class SingularityError(NumericError):
    pass


class DegenerateWeightsError(RecoupleError):
    """Importance weights collapsed, or a monitor requested an abort."""

    exit_code = 5
