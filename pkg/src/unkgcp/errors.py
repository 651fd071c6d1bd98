"""Exception hierarchy shared by every module.

User/data problems derive from :class:`UnkgcpError` and map to CLI exit code 1.
:class:`InvariantError` marks a broken internal guarantee (exit code 2).
"""


class UnkgcpError(Exception):
    """Base class for recoverable, user-facing errors."""


class ParseError(UnkgcpError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(UnkgcpError, ValueError):
    pass


class DegenerateRangeError(ConfigError):
    pass


class ContractError(UnkgcpError):
    """A caller violated an interface precondition (shape, measure, fingerprint)."""


class TrainingError(UnkgcpError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class InvariantError(RuntimeError):
    pass
