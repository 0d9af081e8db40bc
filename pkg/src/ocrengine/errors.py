"""Exception hierarchy shared across the engine."""


class OcrEngineError(Exception):
    """Base class for all engine errors."""


class GeometryError(OcrEngineError):
    """Degenerate or invalid geometric input (collinear points, zero area, ...)."""


class ShapeError(OcrEngineError):
    """Mismatched grid/tensor dimensions."""


class DictionaryError(OcrEngineError):
    """Symbol dictionary inconsistent with the data it is applied to."""


class DecodeError(OcrEngineError):
    """Failure inside a sequence decoder (e.g. a faulty attention step function)."""


class WeightsError(OcrEngineError):
    """KIE weight file malformed or dimensionally inconsistent."""


class BackendError(OcrEngineError):
    """Model backend could not be loaded or executed."""


class ConfigError(OcrEngineError):
    """Pipeline configuration failed to parse or validate."""


class BuildError(OcrEngineError):
    """Pipeline assembly failed (missing model/dict/weight files, bad roles)."""
