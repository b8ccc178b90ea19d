"""Exception types shared across the simulator."""


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""


class DataError(ValueError):
    """Malformed corpus, schema or mapping input."""


class LayoutError(ValueError):
    """Parameter vector does not match the expected model layout."""


class DivergenceError(ArithmeticError):
    """A loss, gradient or server state became non-finite."""
