"""Exception hierarchy. ``exit_code`` is what the command line returns."""


class FedAcrossError(Exception):
    exit_code = 1


class ConfigError(FedAcrossError, ValueError):
    exit_code = 2


class ScarcityError(FedAcrossError, ValueError):
    exit_code = 3


class DivergenceError(FedAcrossError, ArithmeticError):
    exit_code = 4


class TransportError(FedAcrossError, OSError):
    exit_code = 5


class ProtocolError(FedAcrossError, ValueError):
    exit_code = 6


class ShapeError(FedAcrossError, ValueError):
    pass


class DegenerateUpdateError(FedAcrossError, ArithmeticError):
    pass


class StatisticsError(FedAcrossError, ValueError):
    pass


class NoTrainableParametersError(FedAcrossError, ValueError):
    pass


class UnsupportedError(FedAcrossError, ValueError):
    pass


class EmptySupportError(FedAcrossError, ValueError):
    pass


class NotReadyError(FedAcrossError, RuntimeError):
    pass


class StratificationError(FedAcrossError, ValueError):
    pass


class ExhaustionError(ScarcityError):
    """Stream ran dry before every class reached its quota."""

    def __init__(self, message, fill=None):
        super().__init__(message)
        self.fill = dict(fill or {})


class WeightingError(FedAcrossError, ValueError):
    pass
