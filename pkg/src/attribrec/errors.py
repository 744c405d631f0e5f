"""Exception types the CLI maps to distinct process exit codes."""


class ConfigError(Exception):
    """Invalid configuration: unknown keys, unparsable values, bad flags."""

    exit_code = 2


class DataError(Exception):
    """Input data breaks the pipeline contract (unreadable, malformed, empty after filtering)."""

    exit_code = 3


class NumericalError(Exception):
    """Non-finite loss or gradient during optimization."""

    exit_code = 4
