from typing import Any, Dict, Optional


class CodispatchException(Exception):
    iteration: Optional[int] = None


class CaseSyntaxError(CodispatchException):
    def __init__(self, message: str, line: Optional[int] = None,
                 column: Optional[int] = None):
        if line is not None:
            message = '%s (line %d, column %d)' % (message, line, column or 0)
        super(CaseSyntaxError, self).__init__(message)
        self.line = line
        self.column = column


class CaseValidationError(CodispatchException):
    pass


class CouplingError(CodispatchException):
    pass


class ConfigurationError(CodispatchException):
    pass


class DimensionError(CodispatchException):
    pass


class SweepConvergenceError(CodispatchException):
    pass


class VoltageCollapseError(CodispatchException):
    pass


class StaleFeedbackError(CodispatchException):
    pass


class DivergenceError(CodispatchException):
    def __init__(self, message: str, iteration: int,
                 diagnostics: Dict[str, Any]):
        super(DivergenceError, self).__init__(message)
        self.iteration = iteration
        self.diagnostics = diagnostics


class CostModelError(CodispatchException):
    pass


class BusDeliveryError(CodispatchException):
    pass


class ScenarioError(CodispatchException):
    pass


class HorizonMismatchError(CodispatchException):
    pass


class InfeasibleInstanceError(CodispatchException):
    pass
