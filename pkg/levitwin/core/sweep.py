"""Gain sweeps: dispatch simulation runs, estimate spectra and thermometry per mode."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from levitwin.core.controller import FeedbackConfig, LockInController, ideal_feedback_damping
from levitwin.core.errors import FitError
from levitwin.core.model import KB, ModeParams
from levitwin.core.scenario import Scenario
from levitwin.core.simulate import Trajectory, derive_seed, run
from levitwin.core.spectral import Spectrum, analyze_mode, compensate_filter, fit_report, integrate_band, welch_psd

logger = logging.getLogger(__name__)


def _segment_length(scenario: Scenario, sample_rate: float, n_samples: int) -> int:
    if scenario.spectral.segment is None:
        return max(n_samples // 4, 2)
    return min(int(round(scenario.spectral.segment * sample_rate)), n_samples)


def mode_spectra(scenario: Scenario, trajectory: Trajectory) -> Tuple[Spectrum, Dict[str, Spectrum]]:
    """Detector spectrum and the spectrum used to analyze each mode.

    With measure_through_lockin each mode is read through a monitor lock-in centred
    on it and the monitor's response is divided out again.
    """
    settings = scenario.spectral
    fs = trajectory.sample_rate
    det = trajectory.detector_voltage_equivalent
    segment = _segment_length(scenario, fs, det.size)
    detector_spec = welch_psd(det, fs, segment, settings.overlap_fraction, settings.window)
    per_mode = {}
    for mode in trajectory.modes:
        if not settings.measure_through_lockin:
            per_mode[mode.label] = detector_spec
            continue
        monitor = LockInController(
            FeedbackConfig(target_f=mode.f0, gain=1.0, phase=0.0, demod_bandwidth=settings.monitor_bandwidth), fs
        )
        raw = welch_psd(monitor.process(det), fs, segment, settings.overlap_fraction, settings.window)
        per_mode[mode.label] = compensate_filter(raw, np.abs(monitor.response(raw.f)) ** 2)
    return detector_spec, per_mode


def analyze(scenario: Scenario, trajectory: Trajectory, spectra: Dict[str, Spectrum],
            feedback: List[FeedbackConfig]) -> Dict[str, Dict[str, Any]]:
    """Per-mode report: fitted peak, band-integrated thermometry and time-domain temperature."""
    results = {}
    cooled = {}
    for fb in feedback:
        target = fb.mode or min(trajectory.modes, key=lambda m: abs(m.f0 - fb.target_f)).label
        cooled[target] = fb
    for mode in trajectory.modes:
        spec = spectra[mode.label]
        fb = cooled.get(mode.label)
        gamma_ideal = mode.gamma0 + (ideal_feedback_damping(mode, fb) if fb else 0.0)
        entry: Dict[str, Any] = {"gain": fb.gain if fb else 0.0, "gamma_total_ideal_per_s": gamma_ideal}
        near = np.abs(spec.f - mode.f0) <= max(0.01 * mode.f0, 3 * spec.df)
        entry["peak_psd_m2_per_hz"] = float(spec.psd[near].max())
        try:
            fit, band = analyze_mode(spec, mode, scenario.spectral.n_linewidths)
            entry.update(fit_report(fit, band))
        except FitError as e:
            logger.warning(f"Fit failed for mode {mode.label}: {str(e)}; integrating with the ideal linewidth")
            band = integrate_band(spec, mode, gamma_ideal, scenario.spectral.n_linewidths)
            entry.update({"fit_error": str(e), "t_mode_k": band.t_mode, "t_mode_lorentz_k": band.t_mode_lorentz,
                          "a_rms_m": band.a_rms, "n_ph": band.n_ph, "band_fraction": band.band_fraction})
        x = trajectory.x[mode.label]
        entry["t_mode_time_k"] = float(mode.spring_constant * np.mean(x ** 2) / KB)
        results[mode.label] = entry
    return results


def _run_point(payload: Tuple[Dict[str, Any], float, Optional[int], bool]) -> Dict[str, Any]:
    scenario_data, gain_factor, run_index, keep_trajectory = payload
    scenario = Scenario.model_validate(scenario_data)
    config = scenario.sim_config(gain_factor)
    trajectory = run(config, run_index)
    detector_spec, spectra = mode_spectra(scenario, trajectory)
    result = {
        "gain_factor": gain_factor,
        "seed": config.seed if run_index is None else derive_seed(config.seed, run_index),
        "modes": analyze(scenario, trajectory, spectra, config.feedback),
        "detector_spectrum": detector_spec,
        "mode_spectra": spectra,
    }
    if keep_trajectory:
        result["trajectory"] = trajectory
    return result


def run_points(scenario: Scenario, keep_trajectory: bool = False, threads: int = 1,
               realizations: Optional[int] = None) -> List[List[Dict[str, Any]]]:
    """Run every (gain point, realization) pair; results come back ordered by sweep index.

    A scenario without a sweep section is a single point at the configured gains,
    run directly with the scenario seed. realizations overrides the sweep's count.
    """
    data = scenario.model_dump(by_alias=True)
    if scenario.sweep is None:
        factors, realizations = [1.0], 1
        payloads = [(data, 1.0, None, keep_trajectory)]
    else:
        factors = scenario.sweep.gain_factors
        realizations = realizations or scenario.sweep.realizations
        payloads = [(data, g, i * realizations + r, keep_trajectory)
                    for i, g in enumerate(factors) for r in range(realizations)]
    logger.info(f"Dispatching {len(payloads)} run(s) on {threads} worker(s)")
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            flat = list(pool.map(_run_point, payloads))
    else:
        flat = [_run_point(p) for p in payloads]
    return [flat[i * realizations:(i + 1) * realizations] for i in range(len(factors))]


def average_point(point: List[Dict[str, Any]], scenario: Scenario) -> Dict[str, Any]:
    """Average the realizations of one sweep point: mean spectra, then re-analysis."""
    first = point[0]
    averaged = {}
    for label, spec in first["mode_spectra"].items():
        mean_psd = np.mean([r["mode_spectra"][label].psd for r in point], axis=0)
        averaged[label] = spec.model_copy(update={"psd": mean_psd})
    summary = {"gain_factor": first["gain_factor"], "realizations": len(point), "modes": {}}
    for label, spec in averaged.items():
        mode: ModeParams = next(m for m in scenario.simulated_modes() if m.label == label)
        entry = {key: float(np.mean([r["modes"][label][key] for r in point]))
                 for key in ("gain", "t_mode_time_k", "t_mode_k")}
        entry["t_mode_time_sem_k"] = float(np.std([r["modes"][label]["t_mode_time_k"] for r in point], ddof=1)
                                           / math.sqrt(len(point))) if len(point) > 1 else 0.0
        near = np.abs(spec.f - mode.f0) <= max(0.01 * mode.f0, 3 * spec.df)
        entry["peak_psd_m2_per_hz"] = float(spec.psd[near].max())
        try:
            fit, band = analyze_mode(spec, mode, scenario.spectral.n_linewidths)
            entry.update({f"mean_spectrum_{k}": v for k, v in fit_report(fit, band).items()})
        except FitError as e:
            entry["fit_error"] = str(e)
        summary["modes"][label] = entry
    summary["spectra"] = averaged
    return summary
