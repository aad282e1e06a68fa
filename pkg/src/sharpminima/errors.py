class SharpMinimaError(Exception):
    """Base class for errors raised by this package."""


class SpecError(SharpMinimaError, ValueError):
    pass


class ConfigError(SharpMinimaError, ValueError):
    pass


class InvalidBatchError(SharpMinimaError, ValueError):
    pass


class NumericError(SharpMinimaError, ArithmeticError):
    def __init__(self, message, layer=None, point=None):
        super().__init__(message)
        self.layer = layer
        self.point = point


class TrainingDiverged(NumericError):
    def __init__(self, message, last_finite=None, epoch=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.epoch = epoch


class RankError(SharpMinimaError, ArithmeticError):
    pass


class DegenerateError(SharpMinimaError, ValueError):
    pass


class SizeError(SharpMinimaError, ValueError):
    pass


class FormatError(SharpMinimaError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset
