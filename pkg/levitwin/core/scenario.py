"""Scenario schema: everything one CLI or API run needs, loaded from YAML."""
import logging
from pathlib import Path
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from levitwin.core.calibration import CalibrationDrive, DetectionChain
from levitwin.core.controller import FeedbackConfig, fit_actuator_scale
from levitwin.core.errors import ConfigError, ParameterError
from levitwin.core.isolation import IsolationChain
from levitwin.core.model import ModeLabel, ModeParams
from levitwin.core.presets import SCENARIO_DIR, load_presets, mode_preset_data, observed_preset
from levitwin.core.simulate import DisturbanceTone, NonlinearCoupling, SimConfig

logger = logging.getLogger(__name__)


def _resolve_mode(value: Any) -> Any:
    # {preset: mode3, t_env_k: 0.02} -> preset values with overrides
    if isinstance(value, dict) and 'preset' in value:
        data = mode_preset_data(value['preset'])
        data.update({k: v for k, v in value.items() if k != 'preset'})
        return data
    return value


class SimulationSettings(BaseModel):
    model_config = ConfigDict(populate_by_name=True, allow_inf_nan=False)

    dt: Optional[float] = Field(None, gt=0, alias="dt_s", description="Defaults to 1/(50 f_max).")
    duration: float = Field(..., gt=0, alias="duration_s")
    seed: int = Field(0, ge=0, lt=2 ** 64)
    detector_noise_asd: float = Field(0.0, ge=0, alias="detector_noise_asd_m_per_rthz")
    thermal_noise: bool = True
    initial_state: str = Field("thermal", pattern="^(thermal|rest)$")
    surrogate_q_factor: Optional[float] = Field(None, gt=0, description="Replace every mode's Q, keeping its temperature.")
    allow_short_duration: bool = False


class SpectralSettings(BaseModel):
    model_config = ConfigDict(populate_by_name=True, allow_inf_nan=False)

    segment: Optional[float] = Field(None, gt=0, alias="segment_s")
    overlap_fraction: float = Field(0.5, ge=0, lt=1)
    window: str = "hann"
    n_linewidths: float = Field(3.0, gt=0)
    include_asd: bool = False
    measure_through_lockin: bool = Field(False, description="Record the detector through a monitor lock-in and compensate its response.")
    monitor_bandwidth: float = Field(10.0, gt=0, alias="monitor_bandwidth_hz")


class GainSweep(BaseModel):
    gain_factors: List[float] = Field(..., min_length=1, description="Multipliers applied to every configured feedback gain.")
    realizations: int = Field(1, ge=1)

    @field_validator('gain_factors')
    @classmethod
    def _non_negative(cls, values: List[float]) -> List[float]:
        if any(v < 0 for v in values):
            raise ValueError("gain factors must be >= 0")
        return values


class LimitScenario(BaseModel):
    model_config = ConfigDict(populate_by_name=True, allow_inf_nan=False)

    name: str
    mode: ModeParams
    detector_asd: float = Field(..., ge=0, alias="detector_asd_m_per_rthz")
    q_scale: float = Field(1.0, gt=0)

    @field_validator('mode', mode='before')
    @classmethod
    def _mode_preset(cls, value: Any) -> Any:
        return _resolve_mode(value)

    def effective_mode(self) -> ModeParams:
        return self.mode.surrogate(self.mode.q_factor * self.q_scale)


class BodeSettings(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    f_min: float = Field(0.1, gt=0, alias="f_min_hz")
    f_max: float = Field(100.0, gt=0, alias="f_max_hz")
    n_points: int = Field(2000, ge=2)
    band: Tuple[float, float] = Field((50.0, 70.0), alias="band_hz")


def _cooled_label(fb: FeedbackConfig, modes: List[ModeParams]) -> str:
    return fb.mode or min(modes, key=lambda m: abs(m.f0 - fb.target_f)).label


@lru_cache(maxsize=16)
def _fitted_scale(mode: ModeParams, fb: FeedbackConfig, dt: float, t_observed: float) -> float:
    return fit_actuator_scale(mode, fb, dt, t_observed)


class Scenario(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    name: str
    description: Optional[str] = None
    modes: List[ModeParams] = Field(default_factory=list)
    detection_chain: Optional[DetectionChain] = None
    feedback: List[FeedbackConfig] = Field(default_factory=list)
    actuator_fit: Dict[ModeLabel, str] = Field(
        default_factory=dict,
        description="Mode label -> observed operating point; that mode's feedback gets the actuator scale reproducing it.",
    )
    simulation: Optional[SimulationSettings] = None
    spectral: SpectralSettings = Field(default_factory=SpectralSettings)
    sweep: Optional[GainSweep] = None
    isolation: Optional[IsolationChain] = None
    bode: BodeSettings = Field(default_factory=BodeSettings)
    disturbances: List[DisturbanceTone] = Field(default_factory=list)
    coupling: Optional[NonlinearCoupling] = None
    limits: List[LimitScenario] = Field(default_factory=list)
    calibration: Optional[CalibrationDrive] = None
    calibration_mode: Optional[ModeLabel] = None
    output_dir: str = "output"

    @field_validator('modes', mode='before')
    @classmethod
    def _mode_presets(cls, value: Any) -> Any:
        if isinstance(value, list):
            return [_resolve_mode(v) for v in value]
        return value

    @field_validator('detection_chain', 'isolation', mode='before')
    @classmethod
    def _section_presets(cls, value: Any, info) -> Any:
        if value == 'preset':
            return load_presets()[info.field_name]
        return value

    @model_validator(mode='after')
    def _references(self) -> 'Scenario':
        labels = [m.label for m in self.modes]
        for i, fb in enumerate(self.feedback):
            if fb.mode is not None and fb.mode not in labels:
                raise ValueError(f"feedback[{i}] targets undeclared mode '{fb.mode}'")
        for i, tone in enumerate(self.disturbances):
            if tone.mode is not None and tone.mode not in labels:
                raise ValueError(f"disturbances[{i}] targets undeclared mode '{tone.mode}'")
        if self.coupling is not None and self.coupling.mode is not None and self.coupling.mode not in labels:
            raise ValueError(f"coupling targets undeclared mode '{self.coupling.mode}'")
        if self.calibration_mode is not None and self.calibration_mode not in labels:
            raise ValueError(f"calibration_mode '{self.calibration_mode}' is not a declared mode")
        if self.feedback and self.simulation is None:
            raise ValueError("feedback requires a simulation section")
        cooled = [_cooled_label(fb, self.modes) for fb in self.feedback] if self.modes else []
        for label, point in self.actuator_fit.items():
            if label not in cooled:
                raise ConfigError(f"actuator_fit names mode '{label}', which has no feedback channel",
                                  field=f"actuator_fit.{label}")
            observed_preset(point)
        if self.spectral.measure_through_lockin and self.modes:
            f_min = min(m.f0 for m in self.modes)
            if self.spectral.monitor_bandwidth >= f_min / 2:
                raise ConfigError(
                    f"monitor_bandwidth_hz ({self.spectral.monitor_bandwidth}) must be below half the lowest mode "
                    f"frequency ({f_min / 2} Hz)",
                    field="spectral.monitor_bandwidth_hz",
                )
        return self

    def simulated_modes(self) -> List[ModeParams]:
        q = self.simulation.surrogate_q_factor if self.simulation else None
        return [m.surrogate(q) if q else m for m in self.modes]

    def sim_config(self, gain_factor: float = 1.0, seed: Optional[int] = None) -> SimConfig:
        """SimConfig for this scenario with every feedback gain scaled by gain_factor."""
        if self.simulation is None or not self.modes:
            raise ConfigError("scenario has no simulation section or no modes", field="simulation")
        settings = self.simulation
        modes = self.simulated_modes()
        dt = settings.dt or 1 / (50 * max(m.f0 for m in modes))
        try:
            return SimConfig(
                dt=dt,
                duration=settings.duration,
                seed=settings.seed if seed is None else seed,
                modes=modes,
                feedback=[fb.model_copy(update={"gain": fb.gain * gain_factor}) for fb in self.fitted_feedback(modes, dt)],
                detector_noise_asd=settings.detector_noise_asd,
                disturbances=self.disturbances,
                coupling=self.coupling,
                thermal_noise=settings.thermal_noise,
                initial_state=settings.initial_state,
                allow_short_duration=settings.allow_short_duration,
            )
        except ValidationError as e:
            raise _config_error(e, prefix="simulation")

    def fitted_feedback(self, modes: List[ModeParams], dt: float) -> List[FeedbackConfig]:
        """Feedback channels, with the modes listed in actuator_fit scaled to their observed points."""
        fitted = []
        for fb in self.feedback:
            label = _cooled_label(fb, modes)
            if label in self.actuator_fit:
                mode = next(m for m in modes if m.label == label)
                point = observed_preset(self.actuator_fit[label])
                try:
                    scale = _fitted_scale(mode, fb.model_copy(update={"gain": point.gain}), dt, point.t_mode)
                except ParameterError as e:
                    raise ConfigError(str(e), field=f"actuator_fit.{label}")
                fb = fb.model_copy(update={"actuator_scale": scale})
            fitted.append(fb)
        return fitted

    def mode_by_label(self, label: str) -> ModeParams:
        for mode in self.modes:
            if mode.label == label:
                return mode
        raise ConfigError(f"no mode labelled '{label}'", field="modes")


def _config_error(error: ValidationError, prefix: Optional[str] = None) -> ConfigError:
    first = error.errors()[0]
    path = ".".join(str(part) for part in first["loc"])
    cause = first.get("ctx", {}).get("error")
    if not path and isinstance(cause, ConfigError) and cause.field:
        path = cause.field
    if prefix:
        path = f"{prefix}.{path}" if path else prefix
    return ConfigError(f"{path}: {first['msg']}" if path else first['msg'], field=path or None)


def parse_scenario(data: Any) -> Scenario:
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a mapping at the top level")
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise _config_error(e)


def load_scenario(ref: Union[str, Path]) -> Scenario:
    """Load a scenario from a YAML path or from the shipped scenario of that name."""
    path = Path(ref)
    if not path.exists():
        shipped = SCENARIO_DIR / f"{ref}.yaml"
        if not shipped.exists():
            raise ConfigError(f"config '{ref}' is neither a file nor a shipped scenario", field="config")
        path = shipped
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {str(e)}")
    logger.info(f"Loaded scenario from {path}")
    return parse_scenario(data)
