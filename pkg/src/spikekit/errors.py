"""Exception types shared across spikekit."""


class SpikekitError(Exception):
    """Base class for all spikekit errors."""


class DimensionError(SpikekitError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class UsageError(SpikekitError, RuntimeError):
    """An API was called in a state where it cannot run."""


class ConfigError(SpikekitError, ValueError):
    """A configuration value is outside its admissible range."""


class UnsupportedConfigurationError(ConfigError):
    pass


class ContractViolation(SpikekitError, ValueError):
    """An input broke a documented precondition (e.g. non-binary spikes)."""


class NumericError(SpikekitError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DataError(SpikekitError, IOError):
    """A dataset file is missing, truncated or corrupt."""


class LoadError(SpikekitError, IOError):
    """A checkpoint could not be read or does not match the target model."""
