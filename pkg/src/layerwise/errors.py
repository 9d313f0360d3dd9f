"""Exception hierarchy. The CLI maps each category to its own exit code."""


class LayerwiseError(Exception):
    category = "error"


class ShapeError(LayerwiseError, ValueError):
    category = "config"


class ConfigError(LayerwiseError, ValueError):
    category = "config"


class NumericError(LayerwiseError, ArithmeticError):
    category = "numeric"


class DataError(LayerwiseError, ValueError):
    category = "data"


class CheckpointError(LayerwiseError, IOError):
    category = "io"
