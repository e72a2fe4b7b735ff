"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or payload does not follow the expected on-disk format.

    ``reason`` is a short machine-readable tag (``"magic"``, ``"version"``,
    ``"truncated"``, ``"nonfinite"``, ``"schema"``, ...).
    """

    def __init__(self, message: str, reason: str = "format"):
        super().__init__(message)
        self.reason = reason


class NumericalError(RuntimeError):
    """Non-finite values appeared during sampling or training."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
