"""Exception types raised by the package."""


class ModalShapeError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(ModalShapeError, ValueError):
    pass


class InvalidMeshError(ModalShapeError, ValueError):
    pass


class InvalidRequestError(ModalShapeError, ValueError):
    pass


class InvalidPointError(ModalShapeError, ValueError):
    pass


class InvalidInputError(ModalShapeError, ValueError):
    pass


class InsufficientDataError(ModalShapeError, ValueError):
    pass


class DegenerateInputError(ModalShapeError, ValueError):
    pass


class RankDeficientError(ModalShapeError):
    """The feature computation matrix lost rank.

    ``deficiency`` is the number of missing singular directions.
    """

    def __init__(self, message, deficiency):
        super().__init__(message)
        self.deficiency = deficiency


class NumericError(ModalShapeError, ArithmeticError):
    """Non-finite values or solver non-convergence.

    ``diagnostics`` carries whatever the failing routine could report.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigurationError(ModalShapeError, ValueError):
    pass


class RunAborted(ModalShapeError):
    """A closed-loop run failed; ``tick`` and ``cause`` locate the failure."""

    def __init__(self, message, tick, cause=None, diagnostics=None):
        super().__init__(message)
        self.tick = tick
        self.cause = cause
        self.diagnostics = dict(diagnostics or {})
