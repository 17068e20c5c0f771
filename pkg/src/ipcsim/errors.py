"""Exception types shared across the package.

Every error carries a short machine-readable ``code`` so callers (and the
command line driver) can map failures to exit codes without parsing text.
"""


class SimError(Exception):
    """Base class for all simulation errors."""

    code = "sim-error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)


class DegeneratePrimitiveError(SimError):
    """Zero-length edge or zero-area triangle fed to a distance query."""

    code = "degenerate-primitive"


class PenetrationError(SimError):
    """A contact pair reached distance <= 0; the trajectory is invalid."""

    code = "penetration-detected"


class NotSpdError(SimError):
    """A matrix that must be symmetric positive definite is not."""

    code = "not-spd"

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(message or code)


class ConfigError(SimError):
    """Malformed scene/solver configuration."""

    code = "config-error"
