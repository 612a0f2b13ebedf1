"""Error types shared across modules, mapped to CLI exit codes."""


class FormatError(ValueError):
    """A scene or checkpoint file is malformed (bad magic, version, truncation)."""


class UsageError(ValueError):
    """Bad config value or command-line usage."""
