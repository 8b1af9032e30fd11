"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class CapacityError(ValueError):
    """A sequence does not fit in the model's positional range."""


class ConfigError(ValueError):
    """Unknown option or invalid hyperparameter."""


class ContractError(ValueError):
    """A precondition of an operation is violated."""


class NumericError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class DegenerateDataError(DataError):
    """Data carries no signal for the requested fit (e.g. a single class)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimisation."""
