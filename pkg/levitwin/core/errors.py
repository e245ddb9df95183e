from typing import Optional


class LevitwinError(Exception):
    """Base class for all errors raised by levitwin."""


class ParameterError(LevitwinError, ValueError):
    """Non-finite or out-of-range argument to a physics function."""


class ConfigError(LevitwinError, ValueError):
    """Scenario schema or cross-reference violation."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class IntegrationError(LevitwinError, RuntimeError):
    """The time-domain integration diverged."""

    def __init__(self, message: str, mode: str, step: int):
        super().__init__(message)
        self.mode = mode
        self.step = step


class SpectralError(LevitwinError, ValueError):
    """Invalid spectral estimation request."""


class FitError(SpectralError):
    """Lorentzian fit failed; carries the best residual norm reached."""

    def __init__(self, message: str, best_residual: float = float("nan")):
        super().__init__(message)
        self.best_residual = best_residual


class CalibrationError(LevitwinError, ValueError):
    """Unphysical calibration input or result."""


class SaturationWarning(UserWarning):
    """The calibration drive outlasted the ring-up time of the mode."""
