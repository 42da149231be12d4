"""Exception hierarchy for confpose."""


class ConfposeError(Exception):
    """Base class for every error raised by this package."""


class BehindCamera(ConfposeError, ValueError):
    """A point transforms to depth <= DEPTH_EPS."""


class AllPointsBehindCamera(BehindCamera):
    """The initial pose puts model points at non-positive depth."""


class NotARotation(ConfposeError, ValueError):
    pass


class DegenerateCovariance(ConfposeError, ValueError):
    pass


class LengthMismatch(ConfposeError, ValueError):
    pass


class DimensionMismatch(ConfposeError, ValueError):
    pass


class EpsilonTooSmall(ConfposeError, ValueError):
    """floor(l * epsilon) == 0, so no calibration score can serve as quantile."""


class SingularNormalEquations(ConfposeError, ArithmeticError):
    pass


class DegenerateModel(ConfposeError, ValueError):
    pass


class NotStationary(ConfposeError, ValueError):
    pass


class IllConditioned(ConfposeError, ArithmeticError):
    def __init__(self, message, condition_number=None):
        super().__init__(message)
        self.condition_number = condition_number


class DegenerateShape(ConfposeError, ValueError):
    pass


class DegenerateHull(ConfposeError, ValueError):
    pass


class InsufficientSamples(ConfposeError, ValueError):
    pass


class GenerationExhausted(ConfposeError, RuntimeError):
    pass


class MalformedInput(ConfposeError, ValueError):
    """Raised while parsing dataset or model files; carries the 1-based line."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
