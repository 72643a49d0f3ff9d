"""Exception hierarchy shared by every dbplab module."""


class DBPLabError(Exception):
    """Base class for all library errors."""


class ShapeError(DBPLabError, ValueError):
    pass


class NumericError(DBPLabError, ArithmeticError):
    pass


class DeterminismError(DBPLabError, RuntimeError):
    """A computation that must replay bit-for-bit did not, or a required draw is missing."""


class ConfigError(DBPLabError, ValueError):
    pass


class FormatError(DBPLabError, ValueError):
    """Malformed DBPT container, manifest or weight file."""


class TrainingError(DBPLabError, RuntimeError):
    pass
