"""Lumped model of the multistage mass-spring vibration isolation.

Stages hang in series from the support: stage 1 couples to the moving base, each
further stage to the one above it. Every spring has a damper in parallel with
c = 2 zeta sqrt(k m).
"""
import logging
import math
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import eigh

from levitwin.core.errors import ParameterError
from levitwin.core.model import ModeParams
from levitwin.core.simulate import DisturbanceTone, NonlinearCoupling

logger = logging.getLogger(__name__)

Axis = Literal["axial", "lateral"]
AXES: Tuple[Axis, Axis] = ("axial", "lateral")
PULSE_TUBE_HZ = 1.401


class IsolationStage(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    mass: float = Field(..., gt=0, alias="mass_kg")
    k_axial: float = Field(..., gt=0, alias="k_axial_n_per_m")
    k_lateral: float = Field(..., gt=0, alias="k_lateral_n_per_m")
    damping_axial: float = Field(1e-3, gt=0, lt=1, alias="damping_ratio_axial")
    damping_lateral: float = Field(1e-3, gt=0, lt=1, alias="damping_ratio_lateral")

    def stiffness(self, axis: Axis) -> float:
        return self.k_axial if axis == "axial" else self.k_lateral

    def damping_ratio(self, axis: Axis) -> float:
        return self.damping_axial if axis == "axial" else self.damping_lateral


class IsolationChain(BaseModel):
    """Ordered stages from the support to the experiment."""

    model_config = ConfigDict(populate_by_name=True, frozen=True, allow_inf_nan=False)

    stages: List[IsolationStage] = Field(..., min_length=1)
    base_axis: Axis = Field("lateral", description="Axis relevant for the sensor modes.")
    transmissibility_floor: Optional[float] = Field(None, ge=0, description="Magnitude of a parallel short-circuit path, e.g. 1e-6 for 120 dB.")

    def matrices(self, axis: Axis) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mass, damping and stiffness matrices of the chain along one axis."""
        n = len(self.stages)
        m = np.diag([s.mass for s in self.stages])
        k = np.zeros((n, n))
        c = np.zeros((n, n))
        for i, stage in enumerate(self.stages):
            ki = stage.stiffness(axis)
            ci = 2 * stage.damping_ratio(axis) * math.sqrt(ki * stage.mass)
            k[i, i] += ki
            c[i, i] += ci
            if i > 0:
                k[i - 1, i - 1] += ki
                k[i - 1, i] -= ki
                k[i, i - 1] -= ki
                c[i - 1, i - 1] += ci
                c[i - 1, i] -= ci
                c[i, i - 1] -= ci
        return m, c, k


class Resonance(BaseModel):
    f: float
    axis: Axis


def transmissibility(chain: IsolationChain, f, axis: Optional[Axis] = None) -> np.ndarray:
    """Complex ratio of experiment-stage motion to base motion.

    Args:
        chain: Isolation chain.
        f: Frequency or grid in Hz, all > 0.
        axis: Axis to evaluate; the chain's base_axis by default.
    """
    axis = axis or chain.base_axis
    f_arr = np.atleast_1d(np.asarray(f, dtype=float))
    if np.any(f_arr <= 0):
        raise ParameterError("transmissibility needs f > 0")
    m, c, k = chain.matrices(axis)
    first = chain.stages[0]
    k1 = first.stiffness(axis)
    c1 = 2 * first.damping_ratio(axis) * math.sqrt(k1 * first.mass)

    w = 2 * np.pi * f_arr
    dynamic = k[None, :, :] + 1j * w[:, None, None] * c[None, :, :] - w[:, None, None] ** 2 * m[None, :, :]
    load = np.zeros((f_arr.size, len(chain.stages), 1), dtype=complex)
    load[:, 0, 0] = k1 + 1j * w * c1
    ratio = np.linalg.solve(dynamic, load)[:, -1, 0]
    if chain.transmissibility_floor:
        ratio = ratio + chain.transmissibility_floor
    return ratio


def attenuation_db(chain: IsolationChain, f_lo: float, f_hi: float, axis: Optional[Axis] = None,
                   n_points: int = 2000) -> Tuple[float, float]:
    """Smallest and largest attenuation, -20 log10 |T| = 10 log10 |T|^-2, over [f_lo, f_hi]."""
    if not f_lo < f_hi:
        raise ParameterError(f"f_lo must be below f_hi, got {f_lo}, {f_hi}")
    grid = np.geomspace(f_lo, f_hi, n_points)
    attenuation = -20 * np.log10(np.abs(transmissibility(chain, grid, axis)))
    return float(attenuation.min()), float(attenuation.max())


def resonance_catalog(chain: IsolationChain) -> List[Resonance]:
    """Undamped eigenfrequencies of both axes, sorted ascending."""
    catalog = []
    for axis in AXES:
        m, _, k = chain.matrices(axis)
        omega_sq = eigh(k, m, eigvals_only=True)
        catalog.extend(Resonance(f=float(math.sqrt(max(w2, 0.0)) / (2 * math.pi)), axis=axis) for w2 in omega_sq)
    return sorted(catalog, key=lambda r: r.f)


def bode_table(chain: IsolationChain, f_min: float = 0.1, f_max: float = 100.0, n_points: int = 2000) -> pd.DataFrame:
    grid = np.geomspace(f_min, f_max, n_points)
    table = {"f_hz": grid}
    for axis in AXES:
        ratio = transmissibility(chain, grid, axis)
        table[f"mag_db_{axis}"] = 20 * np.log10(np.abs(ratio))
    for axis in AXES:
        table[f"phase_rad_{axis}"] = np.angle(transmissibility(chain, grid, axis))
    return pd.DataFrame(table)


def disturbance_profile(
    chain: IsolationChain,
    fundamental: float = PULSE_TUBE_HZ,
    n_harmonics: int = 10,
    base_force: float = 1e-12,
    extra_lines: Sequence[float] = (),
    include_resonances: bool = True,
    axis: Optional[Axis] = None,
) -> List[DisturbanceTone]:
    """Disturbance tones reaching the experiment stage.

    Harmonics of the pulse tube, any extra lines and the chain's own resonances,
    each with force amplitude base_force * |T(f)|.
    """
    if fundamental <= 0:
        raise ParameterError(f"pulse tube fundamental must be positive, got {fundamental}")
    axis = axis or chain.base_axis
    lines = [fundamental * n for n in range(1, n_harmonics + 1)] + list(extra_lines)
    if include_resonances:
        lines += [r.f for r in resonance_catalog(chain) if r.axis == axis]
    if not lines:
        return []
    magnitude = np.abs(transmissibility(chain, lines, axis))
    tones = [DisturbanceTone(f=f, force_amplitude=base_force * float(a)) for f, a in zip(lines, magnitude)]
    logger.info(f"Disturbance profile: {len(tones)} tones along {axis}")
    return tones


def coupling_partner(mode: ModeParams, tone_f: float, partner_amplitude: float,
                     coupling_coefficient: float) -> NonlinearCoupling:
    """Low-frequency partner that upconverts into a line at tone_f next to the mode.

    A trap stiffness modulated at |f0 - tone_f| puts sidebands on the mode at tone_f
    and at its mirror on the other side of f0.
    """
    return NonlinearCoupling(
        mode=mode.label,
        partner_f=abs(mode.f0 - tone_f),
        partner_amplitude=partner_amplitude,
        coupling_coefficient=coupling_coefficient,
    )
