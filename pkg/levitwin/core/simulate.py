"""Time-domain Langevin simulation of levitated modes under lock-in feedback.

Each mode is an independent damped oscillator advanced with its exact one-step
propagator. Thermal noise enters with the exact per-step covariance; feedback,
disturbance tones and the nonlinear coupling force are held over each step.
"""
import json
import logging
import math
import time
from collections import deque
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from levitwin.core.controller import FeedbackConfig, LockInController
from levitwin.core.errors import IntegrationError, ParameterError
from levitwin.core.io import atomic_path, write_csv
from levitwin.core.model import ModeLabel, ModeParams
from levitwin.core.propagator import discretize, stationary_factor

logger = logging.getLogger(__name__)

INSTABILITY_FACTOR = 1e6


class DisturbanceTone(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    f: float = Field(..., gt=0, alias="f_hz")
    force_amplitude: float = Field(..., ge=0, alias="force_amplitude_n")
    phase: float = Field(0.0, alias="phase_rad")
    mode: Optional[ModeLabel] = Field(None, description="Driven mode; all modes when omitted.")


class NonlinearCoupling(BaseModel):
    """Spring constant modulated by a low-frequency partner motion, k -> k (1 + c x_lf(t))."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    mode: Optional[ModeLabel] = Field(None, description="Coupled mode; the first mode when omitted.")
    partner_f: float = Field(..., gt=0, alias="partner_f_hz")
    partner_amplitude: float = Field(..., ge=0, alias="partner_amplitude_m")
    coupling_coefficient: float = Field(..., alias="coupling_coefficient_per_m")

    @model_validator(mode="after")
    def _perturbative(self) -> "NonlinearCoupling":
        depth = abs(self.coupling_coefficient * self.partner_amplitude)
        if depth >= 0.1:
            raise ValueError(f"coupling depth |c*a| = {depth:.3g} leaves the perturbative regime (< 0.1)")
        return self

    @property
    def depth(self) -> float:
        return self.coupling_coefficient * self.partner_amplitude

    def partner_motion(self, t: np.ndarray) -> np.ndarray:
        return self.partner_amplitude * np.sin(2 * np.pi * self.partner_f * np.asarray(t))


class SimConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    dt: float = Field(..., gt=0, alias="dt_s")
    duration: float = Field(..., gt=0, alias="duration_s")
    seed: int = Field(0, ge=0, lt=2 ** 64)
    modes: List[ModeParams] = Field(..., min_length=1)
    feedback: List[FeedbackConfig] = Field(default_factory=list)
    detector_noise_asd: float = Field(0.0, ge=0, alias="detector_noise_asd_m_per_rthz")
    disturbances: List[DisturbanceTone] = Field(default_factory=list)
    coupling: Optional[NonlinearCoupling] = None
    thermal_noise: bool = True
    initial_state: Literal["thermal", "rest"] = "thermal"
    initial_x: Optional[float] = Field(None, alias="initial_x_m")
    initial_v: Optional[float] = Field(None, alias="initial_v_mps")
    allow_short_duration: bool = False

    @model_validator(mode="after")
    def _check(self) -> "SimConfig":
        labels = [m.label for m in self.modes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"mode labels must be unique, got {labels}")
        f_max = max(m.f0 for m in self.modes)
        if self.dt > 1 / (50 * f_max) * (1 + 1e-9):
            raise ValueError(f"dt_s = {self.dt:.3g} gives fewer than 50 steps per period of the {f_max} Hz mode")
        f_min = min(m.f0 for m in self.modes)
        if not self.allow_short_duration and self.duration < 100 / f_min * (1 - 1e-9):
            raise ValueError(f"duration_s = {self.duration} is shorter than 100 periods of the {f_min} Hz mode")
        referenced = [fb.mode for fb in self.feedback] + [tone.mode for tone in self.disturbances]
        if self.coupling is not None:
            referenced.append(self.coupling.mode)
        for label in referenced:
            if label is not None and label not in labels:
                raise ValueError(f"reference to undeclared mode '{label}'")
        cooled = [self.mode_index(fb) for fb in self.feedback]
        if len(set(cooled)) != len(cooled):
            raise ValueError("each mode accepts at most one feedback channel")
        return self

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.duration / self.dt * (1 + 1e-12)))

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    def mode_index(self, ref: Union[FeedbackConfig, DisturbanceTone, NonlinearCoupling]) -> int:
        label = ref.mode
        if label is not None:
            return [m.label for m in self.modes].index(label)
        if isinstance(ref, FeedbackConfig):
            return int(np.argmin([abs(m.f0 - ref.target_f) for m in self.modes]))
        return 0


class Trajectory(BaseModel):
    """Sampled state, detector output and applied forces of one run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    modes: List[ModeParams]
    dt: float = Field(..., gt=0, description="Step size in s.")
    t: np.ndarray
    x: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    detector_voltage_equivalent: np.ndarray
    feedback_force: Dict[str, np.ndarray] = Field(default_factory=dict)
    disturbance_force: Dict[str, np.ndarray] = Field(default_factory=dict)
    coupling_force: Dict[str, np.ndarray] = Field(default_factory=dict)

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    @property
    def labels(self) -> List[str]:
        return [m.label for m in self.modes]

    def mode(self, label: str) -> ModeParams:
        return self.modes[self.labels.index(label)]

    def to_frame(self) -> pd.DataFrame:
        columns = {"t_s": self.t}
        columns.update({f"x_m_{label}": self.x[label] for label in self.labels})
        columns.update({f"v_mps_{label}": self.v[label] for label in self.labels})
        columns["det_m"] = self.detector_voltage_equivalent
        columns.update({f"ffb_n_{label}": self.feedback_force[label] for label in self.labels if label in self.feedback_force})
        return pd.DataFrame(columns)

    def to_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(self.to_frame(), path)

    def save_npz(self, path: Union[str, Path]) -> Path:
        arrays = {"t": self.t, "dt": np.array(self.dt), "det": self.detector_voltage_equivalent}
        for prefix, series in (("x", self.x), ("v", self.v), ("ffb", self.feedback_force),
                               ("fdist", self.disturbance_force), ("fcpl", self.coupling_force)):
            arrays.update({f"{prefix}__{label}": values for label, values in series.items()})
        meta = json.dumps([m.model_dump(by_alias=True) for m in self.modes])
        with atomic_path(path) as tmp:
            with open(tmp, "wb") as f:
                np.savez(f, modes=np.array(meta), **arrays)
        return Path(path)

    @classmethod
    def load_npz(cls, path: Union[str, Path]) -> "Trajectory":
        with np.load(path) as data:
            modes = [ModeParams.model_validate(m) for m in json.loads(str(data["modes"]))]
            series: Dict[str, Dict[str, np.ndarray]] = {"x": {}, "v": {}, "ffb": {}, "fdist": {}, "fcpl": {}}
            for key in data.files:
                if "__" in key:
                    prefix, label = key.split("__", 1)
                    series[prefix][label] = data[key]
            return cls(
                modes=modes,
                dt=float(data["dt"]),
                t=data["t"],
                x=series["x"],
                v=series["v"],
                detector_voltage_equivalent=data["det"],
                feedback_force=series["ffb"],
                disturbance_force=series["fdist"],
                coupling_force=series["fcpl"],
            )

    def energy_budget(self) -> Dict[str, Dict[str, float]]:
        """Work done by each deterministic force channel and the change in mode energy, in J.

        Work of a force held over a step is F * dx. The bath entry is what thermal
        forcing and intrinsic damping exchanged, the remainder of the balance.
        """
        budget = {}
        for mode in self.modes:
            label = mode.label
            x, v = self.x[label], self.v[label]
            energy = 0.5 * mode.spring_constant * x ** 2 + 0.5 * mode.effective_mass * v ** 2
            dx = np.diff(x)
            entry = {"delta_energy": float(energy[-1] - energy[0])}
            for channel, series in (("feedback", self.feedback_force), ("disturbance", self.disturbance_force),
                                    ("coupling", self.coupling_force)):
                entry[channel] = float(np.sum(series[label][:-1] * dx)) if label in series else 0.0
            entry["bath"] = entry["delta_energy"] - entry["feedback"] - entry["disturbance"] - entry["coupling"]
            budget[label] = entry
        return budget


def derive_seed(seed: int, run_index: int) -> int:
    """Deterministic 64-bit sub-seed for run number run_index of a sweep."""
    return int(np.random.SeedSequence([seed, run_index]).generate_state(1, dtype=np.uint64)[0])


def detector_noise(n: int, noise_asd: float, sample_rate: float, rng: np.random.Generator) -> np.ndarray:
    if noise_asd < 0:
        raise ParameterError(f"noise_asd must be >= 0, got {noise_asd}")
    if noise_asd == 0:
        return np.zeros(n)
    # one-sided ASD to per-sample standard deviation
    return rng.normal(0.0, noise_asd * math.sqrt(sample_rate / 2), n)


def detector(x: np.ndarray, noise_asd: float, sample_rate: float,
             seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Position-equivalent detector output: the true position plus white noise of the given ASD."""
    x = np.asarray(x, dtype=float)
    if noise_asd == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + detector_noise(x.size, noise_asd, sample_rate, rng)


def apply_coupling(x_mode: np.ndarray, partner: NonlinearCoupling, mode: ModeParams, t: np.ndarray) -> np.ndarray:
    """Extra spring force -k c x_lf(t) x of a modulated trap stiffness."""
    if abs(partner.depth) >= 0.1:
        raise ParameterError(f"coupling depth {partner.depth:.3g} leaves the perturbative regime")
    return -mode.spring_constant * partner.coupling_coefficient * partner.partner_motion(t) * np.asarray(x_mode)


def _tone_forces(config: SimConfig, t: np.ndarray) -> Dict[int, np.ndarray]:
    forces: Dict[int, np.ndarray] = {}
    for tone in config.disturbances:
        targets = [config.mode_index(tone)] if tone.mode is not None else range(len(config.modes))
        wave = tone.force_amplitude * np.cos(2 * np.pi * tone.f * t + tone.phase)
        for m in targets:
            forces[m] = forces.get(m, 0.0) + wave
    return forces


def run(config: SimConfig, run_index: Optional[int] = None) -> Trajectory:
    """Integrate m x'' + gamma0 x' + k x = F_th + F_FB + F_dist + F_coupling for every mode.

    Args:
        config: Simulation settings.
        run_index: Sweep index; when given the random streams come from derive_seed(seed, run_index).

    Returns:
        The sampled Trajectory, floor(duration/dt) samples long.

    Raises:
        IntegrationError: A mode exceeded 1e6 times its thermal RMS amplitude.
    """
    started = time.perf_counter()
    seed = config.seed if run_index is None else derive_seed(config.seed, run_index)
    n_steps = config.n_steps
    dt = config.dt
    n_modes = len(config.modes)
    t = np.arange(n_steps) * dt
    logger.info(f"Simulating {n_modes} mode(s), {n_steps} steps, seed {seed}")

    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_modes + 1)]

    xs, vs, props, thermal, limits = [], [], [], [], []
    for m, mode in enumerate(config.modes):
        disc = discretize(mode, dt)
        rng = streams[m]
        x0, v0 = 0.0, 0.0
        if config.initial_state == "thermal":
            x0, v0 = (stationary_factor(disc) @ rng.standard_normal(2)).tolist()
        if config.initial_x is not None:
            x0 = config.initial_x
        if config.initial_v is not None:
            v0 = config.initial_v
        xs.append(x0)
        vs.append(v0)
        (p00, p01), (p10, p11) = disc.phi.tolist()
        props.append((p00, p01, p10, p11, float(disc.gamma_d[0]), float(disc.gamma_d[1])))
        if config.thermal_noise:
            w = rng.standard_normal((n_steps, 2)) @ disc.noise_factor.T
            thermal.append((w[:, 0].tolist(), w[:, 1].tolist()))
        else:
            thermal.append(None)
        limits.append(INSTABILITY_FACTOR * mode.thermal_rms)

    det_noise = detector_noise(n_steps, config.detector_noise_asd, config.sample_rate, streams[-1]).tolist()
    tones = {m: f.tolist() for m, f in _tone_forces(config, t).items()}

    loops = []
    for fb in config.feedback:
        ctrl = LockInController(fb, config.sample_rate)
        loops.append((ctrl, config.mode_index(fb), deque([0.0] * fb.latency_samples), []))

    cpl_mode, cpl_gain = None, None
    if config.coupling is not None:
        cpl_mode = config.mode_index(config.coupling)
        # force per metre of displacement, evaluated once for the whole record
        cpl_gain = apply_coupling(np.ones(n_steps), config.coupling, config.modes[cpl_mode], t).tolist()
    cpl_rec = []

    x_rec = [[] for _ in range(n_modes)]
    v_rec = [[] for _ in range(n_modes)]
    det_rec = []

    for n in range(n_steps):
        det = det_noise[n]
        for m in range(n_modes):
            x = xs[m]
            if abs(x) > limits[m]:
                label = config.modes[m].label
                raise IntegrationError(f"integration unstable: mode '{label}' exceeded 1e6 x thermal RMS at step {n}",
                                       mode=label, step=n)
            x_rec[m].append(x)
            v_rec[m].append(vs[m])
            det += x
        det_rec.append(det)

        u = [0.0] * n_modes
        for m, series in tones.items():
            u[m] += series[n]
        for ctrl, m, pending, rec in loops:
            pending.append(ctrl.step(det))
            force = -pending.popleft()
            rec.append(force)
            u[m] += force
        if cpl_mode is not None:
            force = cpl_gain[n] * xs[cpl_mode]
            cpl_rec.append(force)
            u[cpl_mode] += force

        for m in range(n_modes):
            p00, p01, p10, p11, g0, g1 = props[m]
            x, v, f = xs[m], vs[m], u[m]
            x_new = p00 * x + p01 * v + g0 * f
            v_new = p10 * x + p11 * v + g1 * f
            noise = thermal[m]
            if noise is not None:
                x_new += noise[0][n]
                v_new += noise[1][n]
            xs[m], vs[m] = x_new, v_new

    labels = [m.label for m in config.modes]
    trajectory = Trajectory(
        modes=list(config.modes),
        dt=dt,
        t=t,
        x={label: np.array(x_rec[m]) for m, label in enumerate(labels)},
        v={label: np.array(v_rec[m]) for m, label in enumerate(labels)},
        detector_voltage_equivalent=np.array(det_rec),
        feedback_force={labels[m]: np.array(rec) for _, m, _, rec in loops},
        disturbance_force={labels[m]: np.array(series) for m, series in tones.items()},
        coupling_force={labels[cpl_mode]: np.array(cpl_rec)} if cpl_mode is not None else {},
    )
    logger.info(f"Simulation finished in {time.perf_counter() - started:.2f} s")
    return trajectory
