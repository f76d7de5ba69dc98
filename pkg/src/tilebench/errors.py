"""Exception hierarchy shared by every pipeline stage.

Each class carries the CLI exit status it maps to, so the command layer can
translate failures without a lookup table.
"""


class TilebenchError(Exception):
    exit_code = 3


class ConfigError(TilebenchError):
    exit_code = 2


class ParseError(TilebenchError):
    pass


class InvariantViolation(TilebenchError):
    pass


class UnreadableImage(TilebenchError):
    pass


class ResolutionMismatch(TilebenchError):
    pass


class InsufficientTissue(TilebenchError):
    pass


class DegenerateStains(TilebenchError):
    pass


class MissingScore(TilebenchError):
    pass


class MalformedProbs(TilebenchError):
    pass


class NoTumorTiles(TilebenchError):
    pass


class ShapeMismatch(TilebenchError, ValueError):
    pass


class UnsupportedSpec(TilebenchError):
    exit_code = 2


class TooFewPatients(TilebenchError):
    pass


class NumericError(TilebenchError, ArithmeticError):
    exit_code = 4


class NonFiniteGradient(NumericError):
    pass


class EmptyGroup(TilebenchError):
    pass


class SingleClass(TilebenchError):
    pass


class NoPositives(TilebenchError):
    pass
