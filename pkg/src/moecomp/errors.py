"""Exception hierarchy shared by every module in the package."""


class MoECompressError(Exception):
    """Base class for all errors raised by moecomp."""


class ShapeError(MoECompressError, ValueError):
    pass


class ArgumentError(MoECompressError, ValueError):
    pass


class NumericError(MoECompressError, ArithmeticError):
    pass


class DegenerateError(MoECompressError, ValueError):
    """Input carries no information (all-zero trace, all-zero spectrum)."""


class ConfigurationError(MoECompressError, ValueError):
    pass


class InfeasibleRatioError(MoECompressError, ValueError):
    """The requested compression ratio cannot give every group rank 1."""


class RankError(MoECompressError, ValueError):
    pass


class DivergenceError(MoECompressError, ArithmeticError):
    pass


class FormatError(MoECompressError, ValueError):
    pass


class IntegrityError(MoECompressError):
    """A stored tensor does not match its recorded checksum."""
