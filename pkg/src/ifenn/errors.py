"""Exception hierarchy shared by all modules."""


class IfennError(Exception):
    """Base class for all errors raised by this package."""


class NonPositiveJacobian(IfennError):
    """An element maps to zero or negative area at an integration point."""


class InvalidGeometry(IfennError):
    pass


class ParseError(IfennError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConsistencyError(IfennError):
    pass


class VersionMismatch(IfennError):
    pass


class DimensionMismatch(IfennError):
    pass


class MissingFeed(IfennError):
    pass


class SingularMatrix(IfennError):
    pass


class NotConverged(IfennError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class Aborted(IfennError):
    def __init__(self, message, results=None, state=None):
        super().__init__(message)
        self.results = results
        self.state = state


class ShapeMismatch(IfennError):
    pass


class EmptyDataset(IfennError):
    pass


class DivergedLoss(IfennError):
    pass


class LengthMismatch(IfennError):
    pass


class WidthMismatch(IfennError):
    pass


class ConfigError(IfennError):
    pass
