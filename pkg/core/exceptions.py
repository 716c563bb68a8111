"""Exception hierarchy shared by the pipeline stages.

The CLI maps each family to its own exit status, so library code raises the
most specific class it can and never calls sys.exit itself.
"""


class PipelineError(Exception):
    """Base class for every failure raised by the pipeline."""


class ConfigError(PipelineError, ValueError):
    """Invalid or inconsistent configuration values."""


class InputError(PipelineError, ValueError):
    """Missing, malformed or mismatched input data."""


class NumericError(PipelineError, ArithmeticError):
    """A numerical procedure could not produce a valid result."""


class DegenerateGeometryError(NumericError):
    """Coincident or collinear point configurations."""


class ConvergenceError(NumericError):
    """An iterative solver did not reach its tolerance."""


class EmptyClusterError(NumericError):
    """A plant owns no leaf pixels under the current assignment."""

    def __init__(self, plant_index: int):
        super().__init__(f"plant {plant_index} owns no leaf pixels")
        self.plant_index = plant_index
