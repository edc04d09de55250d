class ContractError(ValueError):
    """An input violated an operation's preconditions."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""
