"""Exception hierarchy shared across the package."""


class AtlError(Exception):
    """Base class for all errors raised by atl."""

    exit_code = 1


class ConfigError(AtlError, ValueError):
    exit_code = 2


class SchemaError(ConfigError):
    """Invalid experiment config; ``field`` carries the dotted path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionError(AtlError, ValueError):
    exit_code = 2


class IncompatibilityError(AtlError, ValueError):
    exit_code = 3


class CheckpointError(AtlError):
    exit_code = 2


class CorruptCheckpointError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ContractViolation(AtlError, ValueError):
    pass


class TrainingDiverged(AtlError, RuntimeError):
    exit_code = 4

    def __init__(self, step, message="loss is not finite"):
        self.step = step
        super().__init__(f"training diverged at step {step}: {message}")


class AggregationError(AtlError, ValueError):
    pass


class ComparisonError(AtlError, ValueError):
    pass


class NotFoundError(AtlError, LookupError):
    pass
