class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class ConfigError(ValueError):
    """Run configuration is invalid or incompatible with the data."""


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss."""
