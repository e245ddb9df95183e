"""Flux-to-motion calibration of the SQUID readout.

A known current through the calibration transformer does two things at once: it
couples straight into the SQUID (the crosstalk voltage) and, through the flux
gradient alpha = dPhi/dx, drives the magnet at resonance. Comparing the ring-up of
the particle signal with the crosstalk gives the energy coupling beta^2, the flux
gradient, and finally the sensitivity dV/dx of the whole chain.
"""
import logging
import math
import warnings
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sympy.physics.units import current, force, inductance, length, magnetic_flux
from sympy.physics.units.systems.si import dimsys_SI

from levitwin.core.errors import CalibrationError, ParameterError, SaturationWarning
from levitwin.core.model import PHI0, ModeParams
from levitwin.core.simulate import DisturbanceTone, SimConfig, detector_noise, run

logger = logging.getLogger(__name__)

# alpha (N/A) times delta (A/m) over k (N/m)
COUPLING_DIMENSION = (force / current) * (current / length) / (force / length)
# (dPhi/dx)^2 / (L_total k)
BETA_SQ_DIMENSION = (magnetic_flux / length) ** 2 / (inductance * force / length)


def is_dimensionless(dimension) -> bool:
    return dimsys_SI.get_dimensional_dependencies(dimension) == {}


def flux_gradient_is_force_per_current() -> bool:
    """Wb/m and N/A are the same unit, so dPhi/dx doubles as the drive constant alpha."""
    return dimsys_SI.equivalent_dims(magnetic_flux / length, force / current)


class DetectionChain(BaseModel):
    """Superconducting pick-up circuit and SQUID readout."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    l_pu: float = Field(..., gt=0, alias="l_pu_h", description="Pick-up coil inductance in H.")
    l_tp: float = Field(..., gt=0, alias="l_tp_h", description="Twisted pair inductance in H.")
    l_in: float = Field(..., gt=0, alias="l_in_h", description="SQUID input coil inductance in H.")
    l_cal: float = Field(..., gt=0, alias="l_cal_h", description="Calibration transformer inductance in H.")
    m_in_sq: float = Field(PHI0 / 0.5e-6, gt=0, alias="m_in_sq_h", description="Input coil to SQUID mutual inductance in H.")
    v_per_phi0: float = Field(..., gt=0, description="SQUID gain in V per flux quantum.")
    noise_asd: float = Field(1e-12, ge=0, alias="noise_asd_m_per_rthz", description="Position noise floor of the readout.")

    @property
    def l_total(self) -> float:
        return self.l_pu + self.l_tp + self.l_in + self.l_cal

    @property
    def dv_dphi(self) -> float:
        """SQUID gain in V/Wb."""
        return self.v_per_phi0 / PHI0

    @property
    def volts_per_amp(self) -> float:
        """SQUID voltage per ampere in the input circuit."""
        return self.dv_dphi * self.m_in_sq


class DriveMeasurement(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    v_crosstalk: float = Field(..., gt=0, alias="v_crosstalk_v")
    delta_v_drive: float = Field(..., ge=0, alias="delta_v_drive_v")
    t_drive: float = Field(..., gt=0, alias="t_drive_s")
    f_drive: float = Field(..., gt=0, alias="f_drive_hz")
    q_override: Optional[float] = Field(None, gt=0, description="Effective Q to use instead of pi f T, e.g. after saturation.")

    @property
    def q_eff(self) -> float:
        if self.q_override is not None:
            return self.q_override
        return q_eff(self.f_drive, self.t_drive)


class CalibrationDrive(BaseModel):
    """Settings of an in-silico calibration run."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    dphi_dx_true: float = Field(..., gt=0, alias="dphi_dx_true_wb_per_m")
    i_crosstalk: float = Field(1e-9, gt=0, alias="i_crosstalk_a", description="Calibration current amplitude in A.")
    t_drive: float = Field(4.0, gt=0, alias="t_drive_s")
    f_drive: Optional[float] = Field(None, gt=0, alias="f_drive_hz", description="Defaults to the mode resonance.")
    detector_noise_asd: float = Field(0.0, ge=0, alias="detector_noise_asd_m_per_rthz")
    thermal_noise: bool = False
    steps_per_period: int = Field(50, ge=50)
    seed: int = Field(0, ge=0)
    target_dv_dx: Optional[float] = Field(None, gt=0, alias="target_dv_dx_v_per_m", description="Sensitivity to invert for the implied beta^2.")


class CalibrationResult(BaseModel):
    q_eff: float
    beta_sq: float
    dphi_dx_wb_per_m: float
    dv_dx_v_per_m: float
    dv_dx_true_v_per_m: float
    recovery_ratio: float
    v_crosstalk_v: float
    delta_v_drive_v: float
    saturated: bool


def q_eff(f: float, t_drive: float, q_factor: Optional[float] = None) -> float:
    """Effective quality factor pi f T_drive of a drive shorter than the ring-up time.

    Warns with SaturationWarning when q_factor is given and pi f T_drive exceeds it.
    """
    if f <= 0 or t_drive <= 0:
        raise ParameterError(f"f and t_drive must be positive, got {f}, {t_drive}")
    value = math.pi * f * t_drive
    if q_factor is not None and value > q_factor:
        warnings.warn(
            f"drive of {t_drive} s at {f} Hz reaches steady state (pi f T = {value:.4g} > Q = {q_factor:.4g})",
            SaturationWarning,
            stacklevel=2,
        )
    return value


def ring_up_q_eff(f: float, t_drive: float, q_factor: float) -> float:
    """Finite-Q ring-up, Q (1 - exp(-pi f T / Q)); tends to pi f T for short drives."""
    return q_factor * -math.expm1(-math.pi * f * t_drive / q_factor)


def energy_coupling(meas: DriveMeasurement) -> float:
    """beta^2 = (dV_drive / V_crosstalk) / Q_eff."""
    beta_sq = meas.delta_v_drive / meas.v_crosstalk / meas.q_eff
    if beta_sq >= 1:
        raise CalibrationError(f"energy coupling beta^2 = {beta_sq:.4g} >= 1 is unphysical")
    return beta_sq


def flux_gradient(chain: DetectionChain, mode: ModeParams, meas: DriveMeasurement) -> float:
    """dPhi/dx = sqrt(L_total m w^2 dV_drive / (Q_eff V_crosstalk)) in Wb/m."""
    return math.sqrt(chain.l_total * mode.spring_constant * energy_coupling(meas))


def beta_sq_from_gradient(chain: DetectionChain, mode: ModeParams, dphi_dx: float) -> float:
    return dphi_dx ** 2 / (chain.l_total * mode.spring_constant)


def volts_per_meter(chain: DetectionChain, dphi_dx: float) -> float:
    """dV/dx = (dV/dPhi_SQ) M_in,SQ dPhi/dx / L_total."""
    return chain.dv_dphi * chain.m_in_sq * dphi_dx / chain.l_total


def gradient_from_volts(chain: DetectionChain, dv_dx: float) -> float:
    """Invert volts_per_meter."""
    return dv_dx * chain.l_total / (chain.dv_dphi * chain.m_in_sq)


def relative_uncertainty(budget: Dict[str, float]) -> float:
    """First-order quadrature sum of independent relative errors."""
    return math.sqrt(sum(r ** 2 for r in budget.values()))


def mode_energy_from_voltage(chain: DetectionChain, mode: ModeParams, dphi_dq: float, v_amplitude: float) -> float:
    """Mode energy 0.5 k q^2 behind a SQUID voltage amplitude.

    q is a displacement for translational modes and an angle for rotational ones;
    at fixed beta^2 the energy does not depend on the mass or inertia.
    """
    q = v_amplitude / volts_per_meter(chain, dphi_dq)
    return 0.5 * mode.spring_constant * q ** 2


def _demodulate_ring_up(t: np.ndarray, v: np.ndarray, f: float):
    """Fit (A0 + A1 t) cos + (B0 + B1 t) sin; returns constant and growth-rate amplitudes."""
    arg = 2 * np.pi * f * t
    c, s = np.cos(arg), np.sin(arg)
    design = np.column_stack([c, t * c, s, t * s])
    (a0, a1, b0, b1), *_ = np.linalg.lstsq(design, v, rcond=None)
    return a0, b0, math.hypot(a1, b1)


def _demodulate_steady(t: np.ndarray, v: np.ndarray, f: float):
    """In-phase (crosstalk) and quadrature (resonant response) amplitudes of a settled record."""
    arg = 2 * np.pi * f * t
    design = np.column_stack([np.cos(arg), np.sin(arg)])
    (a, b), *_ = np.linalg.lstsq(design, v, rcond=None)
    return abs(a), abs(b)


def simulate_calibration(chain: DetectionChain, mode: ModeParams, drive: CalibrationDrive) -> CalibrationResult:
    """Replay the calibration procedure against the simulator.

    The calibration current drives the magnet with F = alpha I_crosstalk, alpha being
    the true flux gradient. The SQUID record is the crosstalk tone plus dV/dx times
    the (noisy) position; its ring-up and crosstalk amplitudes feed
    energy_coupling -> flux_gradient -> volts_per_meter.
    """
    f = mode.f0 if drive.f_drive is None else drive.f_drive
    dt = 1 / (drive.steps_per_period * max(f, mode.f0))
    config = SimConfig(
        dt=dt,
        duration=drive.t_drive,
        seed=drive.seed,
        modes=[mode],
        disturbances=[DisturbanceTone(f=f, force_amplitude=drive.dphi_dx_true * drive.i_crosstalk)],
        thermal_noise=drive.thermal_noise,
        initial_state="thermal" if drive.thermal_noise else "rest",
        allow_short_duration=True,
    )
    trajectory = run(config)
    rng = np.random.default_rng(np.random.SeedSequence([drive.seed, 1]))
    x = trajectory.x[mode.label] + detector_noise(config.n_steps, drive.detector_noise_asd, config.sample_rate, rng)

    dv_dx_true = volts_per_meter(chain, drive.dphi_dx_true)
    v_crosstalk = chain.volts_per_amp * drive.i_crosstalk
    squid = v_crosstalk * np.cos(2 * np.pi * f * trajectory.t) + dv_dx_true * x

    saturated = False
    q_value = q_eff(f, drive.t_drive)
    if q_value > mode.q_factor:
        # steady state: read the particle amplitude at the end of the drive
        q_eff(f, drive.t_drive, mode.q_factor)
        saturated = True
        q_value = mode.q_factor
        tail = trajectory.t >= 0.9 * drive.t_drive
        measured_ct, delta_v = _demodulate_steady(trajectory.t[tail], squid[tail], f)
    else:
        a0, b0, growth = _demodulate_ring_up(trajectory.t, squid, f)
        measured_ct = math.hypot(a0, b0)
        delta_v = growth * drive.t_drive
    meas = DriveMeasurement(v_crosstalk=measured_ct, delta_v_drive=delta_v, t_drive=drive.t_drive, f_drive=f,
                            q_override=q_value if saturated else None)

    beta_sq = energy_coupling(meas)
    dphi_dx = flux_gradient(chain, mode, meas)
    dv_dx = volts_per_meter(chain, dphi_dx)
    logger.info(f"Calibration of mode {mode.label}: dV/dx = {dv_dx:.4g} V/m (true {dv_dx_true:.4g}), beta^2 = {beta_sq:.3g}")
    return CalibrationResult(
        q_eff=meas.q_eff,
        beta_sq=beta_sq,
        dphi_dx_wb_per_m=dphi_dx,
        dv_dx_v_per_m=dv_dx,
        dv_dx_true_v_per_m=dv_dx_true,
        recovery_ratio=dv_dx / dv_dx_true,
        v_crosstalk_v=measured_ct,
        delta_v_drive_v=delta_v,
        saturated=saturated,
    )
