"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so that shell callers can
distinguish configuration problems from data corruption or numerical
blow-ups.
"""


class MesopcError(Exception):
    """Base class; exit code 1 unless a subclass says otherwise."""

    exit_code = 1


class ConfigError(MesopcError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class CorruptFileError(MesopcError):
    """Bad magic, unreadable header, or inconsistent manifest."""

    exit_code = 3


class ShapeMismatchError(MesopcError):
    """Array dims, payload length, or channel layout disagree."""

    exit_code = 4


class NumericsError(MesopcError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""

    exit_code = 5


class CalibrationError(MesopcError):
    """Noise calibration cannot proceed (e.g. no spectral drop anywhere)."""

    exit_code = 5
