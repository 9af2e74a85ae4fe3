"""Exception types shared across the package."""


class SurveyQifError(Exception):
    """Base class for all package errors."""


class ContractError(SurveyQifError, ValueError):
    """An argument violates a documented precondition or invariant."""


class NumericDomainError(SurveyQifError, ArithmeticError):
    """A quantity left its numeric domain (nonpositive variance, etc.)."""


class SingularMatrixError(SurveyQifError, ArithmeticError):
    """A matrix that must be invertible is numerically singular."""


class ConfigError(SurveyQifError, ValueError):
    """A configuration file or value is invalid."""


class DataError(SurveyQifError, ValueError):
    """An input data file is malformed."""


class CampaignError(SurveyQifError, RuntimeError):
    """A simulation campaign failed beyond the tolerated failure rate."""
