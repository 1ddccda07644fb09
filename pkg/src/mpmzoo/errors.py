"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to (2 validation, 3 runtime
instability, 4 I/O).
"""


class MPMError(Exception):
    exit_code = 1


class ValidationError(MPMError, ValueError):
    exit_code = 2


class ParseError(MPMError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None, field=None, missing=False):
        self.line = line
        self.field = field
        if missing:
            self.exit_code = 4
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class IoError(MPMError, OSError):
    exit_code = 4


class SingularInput(ValidationError):
    pass


class NonPositiveSingularValue(ValidationError):
    pass


class InvalidPoissonRatio(ValidationError):
    pass


class DegenerateJacobian(ValidationError):
    pass


class OutOfDomain(ValidationError):
    pass


class EmptySource(ValidationError):
    pass


class EmptyCloud(ParseError):
    pass


class TooFewParticles(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnstableStep(MPMError, FloatingPointError):
    exit_code = 3

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
