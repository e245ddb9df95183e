"""Closed-form physics of a feedback-damped levitated mode.

Power spectral densities, thermal force noise, mode temperature, phonon number,
cooling limits and zero-point motion. Rotational modes use the moment of inertia
and torque noise in place of mass and force noise; the temperature arithmetic is shared.
"""
import math
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import constants

from levitwin.core.errors import ParameterError

KB = constants.k
HBAR = constants.hbar
PHI0 = constants.physical_constants["mag. flux quantum"][0]

ModeLabel = Literal["x", "y", "z", "alpha", "beta", "gamma"]

# Trap modes ordered by resonance frequency, lowest first.
MODE_ORDER = ("gamma", "z", "y", "x", "beta", "alpha")

ArrayLike = Union[float, np.ndarray]


class ModeParams(BaseModel):
    """One mechanical mode of the levitated magnet."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    mass: float = Field(..., gt=0, alias="mass_kg", description="Mass of the levitated body in kg.")
    f0: float = Field(..., gt=0, alias="f0_hz", description="Resonance frequency in Hz.")
    q_factor: float = Field(..., gt=0, description="Intrinsic quality factor.")
    t_env: float = Field(..., gt=0, alias="t_env_k", description="Effective environment temperature in K.")
    label: ModeLabel = Field("y", description="Mode label (x, y, z translations; alpha, beta, gamma rotations).")
    kind: Literal["translational", "rotational"] = "translational"
    inertia: Optional[float] = Field(None, gt=0, alias="inertia_kg_m2", description="Moment of inertia in kg m^2, rotational modes only.")

    @model_validator(mode="after")
    def _inertia_for_rotation(self) -> "ModeParams":
        if self.kind == "rotational" and self.inertia is None:
            raise ValueError(f"rotational mode '{self.label}' requires inertia_kg_m2")
        return self

    @property
    def omega0(self) -> float:
        return 2 * math.pi * self.f0

    @property
    def effective_mass(self) -> float:
        """Mass for translations, moment of inertia for rotations."""
        if self.kind == "rotational":
            return self.inertia
        return self.mass

    @property
    def gamma0(self) -> float:
        """Intrinsic damping rate in 1/s."""
        return self.omega0 / self.q_factor

    @property
    def spring_constant(self) -> float:
        return self.effective_mass * self.omega0 ** 2

    @property
    def damping_coefficient(self) -> float:
        return self.effective_mass * self.gamma0

    @property
    def thermal_rms(self) -> float:
        return rms_from_temperature(self.t_env, self)

    def surrogate(self, q_factor: float) -> "ModeParams":
        """Copy with a lowered quality factor; thermal force noise rescales so t_env is preserved."""
        return self.model_copy(update={"q_factor": float(q_factor)})


class CoolingLimits(BaseModel):
    model_config = ConfigDict(frozen=True)

    s_f: float = Field(..., gt=0, description="Thermal force PSD in N^2/Hz (N^2 m^2/Hz for rotations).")
    s_x_det: float = Field(..., gt=0, description="Detection noise PSD in m^2/Hz.")
    t_min: float = Field(..., gt=0)
    n_ph_min: float = Field(..., gt=0)
    x_zpm: float = Field(..., gt=0)


def _require_finite(**values: ArrayLike) -> None:
    for name, value in values.items():
        if not np.all(np.isfinite(value)):
            raise ParameterError(f"{name} must be finite, got {value}")


def lorentzian_psd(mode: ModeParams, gamma_fb: float, f: ArrayLike) -> ArrayLike:
    """One-sided displacement PSD of the feedback-damped mode in m^2/Hz.

    Args:
        mode: Mode parameters.
        gamma_fb: Feedback damping rate in 1/s.
        f: Frequency or frequency grid in Hz.

    Returns:
        S_x at each frequency, a float for scalar input.
    """
    _require_finite(gamma_fb=gamma_fb, f=f)
    f_arr = np.asarray(f, dtype=float)
    if gamma_fb < 0:
        raise ParameterError(f"gamma_fb must be >= 0, got {gamma_fb}")
    if np.any(f_arr < 0):
        raise ParameterError("frequencies must be >= 0")

    w = 2 * np.pi * f_arr
    w0 = mode.omega0
    numerator = 4 * KB * mode.t_env * mode.gamma0 / mode.effective_mass
    psd = numerator / ((w0 ** 2 - w ** 2) ** 2 + w ** 2 * (mode.gamma0 + gamma_fb) ** 2)
    if psd.ndim == 0:
        return float(psd)
    return psd


def thermal_force_psd(mode: ModeParams) -> float:
    """S_F = 4 kB T m w0 / Q (S_tau with the inertia for rotational modes)."""
    if mode.kind == "rotational" and mode.inertia is None:
        raise ParameterError(f"rotational mode '{mode.label}' has no inertia")
    return 4 * KB * mode.t_env * mode.effective_mass * mode.omega0 / mode.q_factor


def analytic_mode_temperature(mode: ModeParams, gamma_fb: float) -> float:
    _require_finite(gamma_fb=gamma_fb)
    if gamma_fb < 0:
        raise ParameterError(f"gamma_fb must be >= 0, got {gamma_fb}")
    return mode.t_env * mode.gamma0 / (mode.gamma0 + gamma_fb)


def phonon_number(t_mode: float, f0: float) -> float:
    _require_finite(t_mode=t_mode, f0=f0)
    if t_mode <= 0 or f0 <= 0:
        raise ParameterError(f"t_mode and f0 must be positive, got {t_mode}, {f0}")
    return KB * t_mode / (HBAR * 2 * math.pi * f0)


def single_phonon_temperature(f0: float) -> float:
    """Mode temperature of one phonon, hbar w0 / kB."""
    return HBAR * 2 * math.pi * f0 / KB


def zero_point_motion(mode: ModeParams) -> float:
    return math.sqrt(HBAR / (2 * mode.effective_mass * mode.omega0))


def min_temperature(mode: ModeParams, s_x_det: float) -> CoolingLimits:
    """Detection-noise limited minimum mode temperature.

    T_min = (w0 / 2 kB) sqrt(S_F S_x,det), with the phonon number and zero-point
    motion of the same mode.
    """
    _require_finite(s_x_det=s_x_det)
    if s_x_det <= 0:
        raise ParameterError(f"s_x_det must be positive, got {s_x_det}")
    s_f = thermal_force_psd(mode)
    t_min = mode.omega0 / (2 * KB) * math.sqrt(s_f * s_x_det)
    return CoolingLimits(
        s_f=s_f,
        s_x_det=s_x_det,
        t_min=t_min,
        n_ph_min=phonon_number(t_min, mode.f0),
        x_zpm=zero_point_motion(mode),
    )


def rms_from_temperature(t_mode: float, mode: ModeParams) -> float:
    _require_finite(t_mode=t_mode)
    if t_mode <= 0:
        raise ParameterError(f"t_mode must be positive, got {t_mode}")
    return math.sqrt(KB * t_mode / mode.spring_constant)


def _noise_heating_scale(mode: ModeParams, s_x_det: float) -> float:
    return mode.spring_constant * mode.omega0 * s_x_det / (4 * KB * mode.q_factor)


def noise_limited_temperature(mode: ModeParams, gamma_fb: float, s_x_det: float) -> float:
    """Mode temperature when the detection noise is fed back with the signal.

    With g = gamma_fb / gamma0 the thermal part falls as T/(1+g) while the fed-back
    noise heats the mode by k w0 S_x,det g^2 / (4 kB Q (1+g)).
    """
    _require_finite(gamma_fb=gamma_fb, s_x_det=s_x_det)
    if gamma_fb < 0 or s_x_det < 0:
        raise ParameterError("gamma_fb and s_x_det must be >= 0")
    g = gamma_fb / mode.gamma0
    return mode.t_env / (1 + g) + _noise_heating_scale(mode, s_x_det) * g ** 2 / (1 + g)


def optimal_feedback_damping(mode: ModeParams, s_x_det: float) -> float:
    """Feedback damping rate minimizing noise_limited_temperature."""
    _require_finite(s_x_det=s_x_det)
    if s_x_det <= 0:
        raise ParameterError(f"s_x_det must be positive, got {s_x_det}")
    a = _noise_heating_scale(mode, s_x_det)
    return mode.gamma0 * (math.sqrt((mode.t_env + a) / a) - 1)
