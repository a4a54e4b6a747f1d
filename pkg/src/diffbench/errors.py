"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A configuration value is structurally invalid (bad enum, bad shape plan, unknown key)."""


class DomainError(ValueError):
    """A runtime input violates an operation's precondition (out-of-range index, shape mismatch)."""


class ArchiveError(RuntimeError):
    """A tensor archive or checkpoint cannot be read/written (version, truncation, missing names)."""


class ProtocolError(RuntimeError):
    """An interaction contract was violated (e.g. stepping a finished environment)."""
