"""Exception hierarchy.

``ConfigError`` and ``DataError`` split the failures the CLI maps to exit
codes 2 and 3; everything else derives from ``GazeRefineError``.
"""


class GazeRefineError(Exception):
    pass


class ConfigError(GazeRefineError):
    pass


class DataError(GazeRefineError):
    pass


# geometry
class RayParallel(GazeRefineError):
    pass


class RayBackward(GazeRefineError):
    pass


class DegenerateRay(GazeRefineError):
    pass


class UnitMismatch(GazeRefineError):
    pass


# refinement / raster / pt
class NoValidSamples(DataError):
    pass


class DegenerateHeatmap(GazeRefineError):
    pass


class EmptyDataset(DataError):
    pass


class MissingCheckpoint(ConfigError):
    pass


# ingestion
class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message)


class DuplicateIndex(DataError):
    pass


class LengthExceedsStream(UserWarning):
    pass
