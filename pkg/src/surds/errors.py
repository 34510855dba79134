"""Exception types raised across the pipeline."""


class SurdsError(Exception):
    pass


class AllBackground(SurdsError, ValueError):
    """No ink pixel was found in an image or mask."""


class ShapeMismatch(SurdsError, ValueError):
    pass


class CountMismatch(SurdsError, ValueError):
    pass


class ParseError(SurdsError, ValueError):
    pass


class MissingFile(SurdsError, FileNotFoundError):
    pass


class InsufficientSamples(SurdsError, ValueError):
    pass


class MissingEmbedding(SurdsError, KeyError):
    pass


class DegenerateInput(SurdsError, ValueError):
    pass


class NumericalError(SurdsError, FloatingPointError):
    pass


class DataError(SurdsError):
    pass
