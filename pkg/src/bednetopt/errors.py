"""Exception types shared across the package."""


class ConfigError(Exception):
    """Invalid run configuration: unknown keys, bad values, schema violations."""


class DataError(Exception):
    """Input data violates a structural requirement (files, graphs, panels)."""


class NumericalError(Exception):
    """A numerical routine failed to produce a usable result."""
