"""Engine error taxonomy, mapped onto CLI exit codes by the cli module."""


class NlcovError(Exception):
    """Base class for all engine errors."""


class ConfigError(NlcovError):
    """Bad user-supplied configuration (exit code 2)."""


class FormatError(NlcovError):
    """Malformed trace/state/model file (exit code 3)."""


class RunnerError(NlcovError):
    """External model runner failed or violated the protocol (exit code 4)."""
