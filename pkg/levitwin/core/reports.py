"""Report assembly shared by the command line and the HTTP service."""
import logging
from typing import Any, Dict, List, Optional

import pandas as pd

from levitwin.core.calibration import (
    beta_sq_from_gradient,
    gradient_from_volts,
    relative_uncertainty,
    simulate_calibration,
)
from levitwin.core.errors import ConfigError
from levitwin.core.isolation import AXES, IsolationChain, attenuation_db, bode_table, resonance_catalog
from levitwin.core.model import (
    min_temperature,
    noise_limited_temperature,
    optimal_feedback_damping,
    single_phonon_temperature,
    zero_point_motion,
)
from levitwin.core.presets import uncertainty_budget
from levitwin.core.scenario import BodeSettings, LimitScenario, Scenario

logger = logging.getLogger(__name__)


def limit_entry(limit: LimitScenario) -> Dict[str, Any]:
    """Cooling limits of one mode, with the optimum of the noise-fed-back temperature."""
    mode = limit.effective_mode()
    s_x_det = limit.detector_asd ** 2
    entry: Dict[str, Any] = {
        "name": limit.name,
        "label": mode.label,
        "f0_hz": mode.f0,
        "q_factor": mode.q_factor,
        "t_env_k": mode.t_env,
        "detector_asd_m_per_rthz": limit.detector_asd,
        "x_zpm_m": zero_point_motion(mode),
        "single_phonon_temperature_k": single_phonon_temperature(mode.f0),
    }
    if s_x_det == 0:
        # noiseless detection: no limit from back-action of the fed-back noise
        entry.update({"t_min_k": 0.0, "n_ph_min": 0.0, "s_f_n2_per_hz": None})
        return entry
    limits = min_temperature(mode, s_x_det)
    gamma_opt = optimal_feedback_damping(mode, s_x_det)
    entry.update({
        "s_f_n2_per_hz": limits.s_f,
        "s_x_det_m2_per_hz": s_x_det,
        "t_min_k": limits.t_min,
        "n_ph_min": limits.n_ph_min,
        "optimal_gamma_fb_per_s": gamma_opt,
        "optimal_damping_ratio": gamma_opt / mode.gamma0,
        "t_noise_limited_k": noise_limited_temperature(mode, gamma_opt, s_x_det),
    })
    return entry


def limits_report(scenario: Scenario) -> Dict[str, Any]:
    if not scenario.limits:
        raise ConfigError("scenario has no limits section", field="limits")
    entries = [limit_entry(limit) for limit in scenario.limits]
    for e in entries:
        logger.info(f"Limit {e['name']}: T_min = {e['t_min_k']:.4g} K, n = {e['n_ph_min']:.4g}")
    return {"scenario": scenario.name, "limits": entries}


def calibration_report(scenario: Scenario) -> Dict[str, Any]:
    """Run the in-silico calibration and echo its inputs next to the recovered chain."""
    if scenario.calibration is None or scenario.detection_chain is None:
        raise ConfigError("calibration needs calibration and detection_chain sections", field="calibration")
    if not scenario.modes:
        raise ConfigError("calibration needs at least one mode", field="modes")
    label = scenario.calibration_mode or scenario.modes[0].label
    mode = scenario.mode_by_label(label)
    chain = scenario.detection_chain
    drive = scenario.calibration
    result = simulate_calibration(chain, mode, drive)
    budget = uncertainty_budget()
    report: Dict[str, Any] = {
        "scenario": scenario.name,
        "inputs": {
            "mode": label,
            "f0_hz": mode.f0,
            "q_factor": mode.q_factor,
            "l_total_h": chain.l_total,
            "m_in_sq_h": chain.m_in_sq,
            "v_per_phi0": chain.v_per_phi0,
            "dphi_dx_true_wb_per_m": drive.dphi_dx_true,
            "i_crosstalk_a": drive.i_crosstalk,
            "t_drive_s": drive.t_drive,
            "detector_noise_asd_m_per_rthz": drive.detector_noise_asd,
        },
        **result.model_dump(),
        "relative_error": result.recovery_ratio - 1,
        "uncertainty_budget": budget,
        "relative_uncertainty": relative_uncertainty(budget),
    }
    if drive.target_dv_dx is not None:
        gradient = gradient_from_volts(chain, drive.target_dv_dx)
        report["target"] = {
            "dv_dx_v_per_m": drive.target_dv_dx,
            "dphi_dx_wb_per_m": gradient,
            "beta_sq": beta_sq_from_gradient(chain, mode, gradient),
        }
    return report


def isolation_tables(chain: IsolationChain, bode: Optional[BodeSettings] = None):
    """Bode table, resonance table and the attenuation summary over the band of interest."""
    bode = bode or BodeSettings()
    table = bode_table(chain, bode.f_min, bode.f_max, bode.n_points)
    resonances = pd.DataFrame([{"f_hz": r.f, "axis": r.axis} for r in resonance_catalog(chain)])
    f_lo, f_hi = bode.band
    attenuation: Dict[str, Any] = {"band_hz": [f_lo, f_hi], "base_axis": chain.base_axis}
    for axis in AXES:
        lo, hi = attenuation_db(chain, f_lo, f_hi, axis)
        attenuation[axis] = {"min_db": lo, "max_db": hi}
    return table, resonances, attenuation


def resonance_list(resonances: pd.DataFrame) -> List[Dict[str, Any]]:
    return resonances.to_dict(orient="records")
