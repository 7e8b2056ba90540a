"""Exception types shared across the package."""


class QraterError(Exception):
    """Base class for package-specific failures."""


class ConfigError(QraterError, ValueError):
    """Invalid configuration value or infeasible generator/layout spec."""


class ShapeError(QraterError, ValueError):
    """Operand shapes (or ranks) do not satisfy an operation's contract."""


class NumericError(QraterError, ArithmeticError):
    """A tensor acquired a NaN or Inf entry."""


class ContractError(QraterError, RuntimeError):
    """A documented precondition was violated by the caller."""


class EmptyLossError(ContractError):
    """A loss was requested over a label set with no observed entries."""


class ParseError(QraterError, ValueError):
    """Malformed input file; message carries the offending line number."""


class IntegrityError(QraterError, ValueError):
    """Input data violates an integrity rule (e.g. duplicate labels)."""


class FormatError(QraterError, ValueError):
    """Binary container is corrupt, truncated, or has the wrong magic."""


class TrainingError(QraterError, RuntimeError):
    """Optimization failed; message names the offending epoch/step."""
