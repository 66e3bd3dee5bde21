"""Exception types shared across the package."""


class RerandError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(RerandError):
    """Array shapes are inconsistent with each other or with the design."""


class RankDeficient(RerandError):
    """Sample covariance is singular beyond tolerance (collinear covariates)."""


class InfeasibleAssignment(RerandError):
    """An assignment violates the design structure's linear constraints."""


class InvalidSwap(RerandError):
    """Swap positions do not satisfy the treated/control precondition."""


class StageMismatch(RerandError):
    """A prefix length or stage index is inconsistent with the stage layout."""


class IterationBudgetExceeded(RerandError):
    """A sampler exhausted its candidate-evaluation budget before acceptance."""

    def __init__(self, message, draw_index=None, stage=None):
        super().__init__(message)
        self.draw_index = draw_index
        self.stage = stage


class ConfigInvalid(RerandError):
    """Sampler hyperparameters are out of range for the instance."""


class EmptyArm(RerandError):
    """An assignment leaves one treatment arm empty."""


class BracketFailed(RerandError):
    """Confidence-bound search never crossed the target level in its bracket."""


class DegenerateSample(RerandError):
    """A draw collection carries no variation (all assignments identical)."""


class ConfigError(RerandError):
    """Command-line or file configuration is inconsistent."""


class ParseError(RerandError):
    """A data file could not be parsed; carries the offending location."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


class MixedType(ParseError):
    """A column mixes numeric and non-numeric cells."""


class EmptyFile(ParseError):
    """The input file contains no data rows."""
