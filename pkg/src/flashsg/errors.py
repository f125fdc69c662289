"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates a documented precondition (shape, range, unit length)."""


class DegenerateGeometryError(ContractError):
    """Geometry for which the requested quantity is undefined."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared during optimization or rendering."""

    def __init__(self, message, step=None, parameter=None, stage=None):
        super().__init__(message)
        self.step = step
        self.parameter = parameter
        self.stage = stage


class RecordLoadError(IOError):
    """A dataset record file is missing or corrupt."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class SceneRejected(RuntimeError):
    """A sampled scene produced no visible pixels and must be resampled."""
