"""Exception hierarchy shared by every eedit module."""


class EEditError(Exception):
    """Base class for all eedit errors."""


class InvalidArgument(EEditError, ValueError):
    pass


class StateError(EEditError, RuntimeError):
    """Raised when an operation runs against state it cannot use (e.g. an unwritten cache)."""


class ConfigError(EEditError, ValueError):
    pass


class FormatError(EEditError):
    """Base class for malformed tensor or plan files."""


class BadMagic(FormatError):
    pass


class VersionMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class InconsistentFile(FormatError):
    """Header and body disagree (entry counts, coordinates, lengths)."""
