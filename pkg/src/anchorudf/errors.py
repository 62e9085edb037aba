"""Exception hierarchy shared by the pipeline stages.

The CLI maps :class:`DataError` to exit code 2 and :class:`NumericError` to
exit code 3.
"""


class DataError(ValueError):
    """Bad input data: malformed files, empty meshes, invalid arguments."""


class MeshError(DataError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(DataError):
    """Malformed binary file (training set, checkpoint, PLY)."""


class UndefinedDirectionError(DataError):
    """Query point lies on the surface, where the distance gradient is undefined."""


class NumericError(ArithmeticError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, message: str, state: dict | None = None):
        self.state = state or {}
        super().__init__(message)


class ExtractionError(NumericError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
