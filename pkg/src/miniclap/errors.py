"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """An argument violates an operation's precondition."""


class InvalidConfig(ValueError):
    """A stage or model configuration is inconsistent."""


class ParseError(ValueError):
    """A text input (manifest, config file) could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(ValueError):
    """A binary file is corrupt, truncated, or has the wrong magic."""


class Unsupported(RuntimeError):
    """The requested operation is not available for this configuration."""
