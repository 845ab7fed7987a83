"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shape mismatch or malformed input file."""


class DomainError(ArithmeticError):
    """An operation was asked to evaluate outside its mathematical domain."""


class ManifestError(ConfigError):
    """A label manifest could not be parsed; ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; diagnostics were dumped to ``dump_dir``."""

    def __init__(self, message, dump_dir=None):
        super().__init__(message)
        self.dump_dir = dump_dir
