"""Error taxonomy shared by every module.

Four families, chosen so the CLI can map exceptions onto exit codes
without inspecting messages: usage problems, bad input data or config,
violated internal contracts, and numeric failures.
"""


class ElmError(Exception):
    """Base class for all errors raised by this package."""


class UsageError(ElmError):
    """Bad command-line invocation: unknown subcommand, missing flag."""


class DataError(ElmError):
    """Unusable input: empty corpus, malformed file, bad header."""


class ConfigError(DataError):
    """Invalid or inconsistent configuration values."""


class ContractError(ElmError):
    """A caller violated a documented precondition (shape, range, state)."""


class NumericError(ElmError):
    """Numeric breakdown: non-finite values, failed decomposition."""
