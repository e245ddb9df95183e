import numpy as np
import pytest

from levitwin.core.controller import FeedbackConfig, closed_loop_temperature, gain_for_damping, loop_is_stable
from levitwin.core.model import min_temperature, rms_from_temperature
from levitwin.core.presets import observed_preset
from levitwin.core.scenario import load_scenario, parse_scenario
from levitwin.core.spectral import integrate_band
from levitwin.core.sweep import average_point, run_points

pytestmark = pytest.mark.slow


def cooling_scenario(q_factor, ratios, realizations, detector_asd=0.0, seed=5):
    """mode3 with a unit-gain channel; the sweep factors are the delay-free damping ratios."""
    data = {
        "name": "cooling",
        "modes": [{"preset": "mode3"}],
        "feedback": [{"mode": "y", "target_f_hz": 50.59, "gain": 1.0, "demod_bandwidth_hz": 20.0}],
        "simulation": {"duration_s": 40.0, "seed": seed, "surrogate_q_factor": q_factor,
                       "detector_noise_asd_m_per_rthz": detector_asd},
        "sweep": {"gain_factors": [0.0], "realizations": realizations},
    }
    mode = parse_scenario(data).simulated_modes()[0]
    unit = mode.gamma0 * mode.mass * mode.omega0
    data["sweep"]["gain_factors"] = [r * unit for r in ratios]
    return parse_scenario(data)


def time_domain_temperatures(scenario):
    return [average_point(point, scenario)["modes"]["y"]["t_mode_time_k"] for point in run_points(scenario)]


def test_cooled_temperature_follows_closed_loop_prediction():
    scenario = cooling_scenario(100, [1.0, 3.0], realizations=4)
    mode = scenario.simulated_modes()[0]
    config = scenario.sim_config()
    measured = time_domain_temperatures(scenario)
    for factor, t_time in zip(scenario.sweep.gain_factors, measured):
        fb = FeedbackConfig(mode="y", target_f_hz=50.59, gain=factor, demod_bandwidth_hz=20.0)
        assert t_time == pytest.approx(closed_loop_temperature(mode, fb, config.dt), rel=0.15)
    assert measured[1] < measured[0] < mode.t_env


def test_detection_noise_gives_an_optimal_gain():
    s_x_det = (10e-12) ** 2
    scenario = cooling_scenario(1e3, [1.0, 10.0, 100.0], realizations=3, detector_asd=10e-12)
    mode = scenario.simulated_modes()[0]
    measured = time_domain_temperatures(scenario)
    assert int(np.argmin(measured)) == 1
    t_limit = min_temperature(mode, s_x_det).t_min
    assert t_limit / 2 < measured[1] < 2 * t_limit


def test_upconverted_lines_and_their_suppression():
    scenario = load_scenario("upconversion")
    points = [average_point(point, scenario) for point in run_points(scenario)]
    spectra = [p["spectra"]["y"] for p in points]
    f = spectra[0].f
    df = spectra[0].df

    for line in (49.67, 51.51):
        window = (f > line - 0.25) & (f < line + 0.25)
        peak = f[window][np.argmax(spectra[0].psd[window])]
        assert abs(peak - line) <= 2 * df

    def band_power(spec, center):
        sel = np.abs(spec.f - center) <= 0.1
        return float(np.sum(spec.psd[sel]) * df)

    for center in (49.67, 50.59, 51.51):
        assert band_power(spectra[1], center) < band_power(spectra[0], center)


def test_two_mode_sweep_lowers_both_peaks():
    scenario = load_scenario("mode34_sweep")
    points = [average_point(point, scenario) for point in run_points(scenario)]
    for label in ("y", "x"):
        peaks = [p["modes"][label]["peak_psd_m2_per_hz"] for p in points]
        assert all(b < a for a, b in zip(peaks, peaks[1:]))
        temperatures = [p["modes"][label]["t_mode_time_k"] for p in points]
        assert temperatures[-1] < 0.3 * temperatures[0]


def test_damping_ratios_up_to_hundred_follow_the_gain_law():
    ratios = [1.0, 3.0, 10.0, 30.0, 100.0]
    channel = {"mode": "y", "target_f_hz": 50.59, "gain": 1.0, "demod_bandwidth_hz": 25.0,
               "lowpass_corner_hz": 25.0, "latency_samples": 0, "compensate_delay": True}
    data = {
        "name": "gain_law",
        "modes": [{"preset": "mode3"}],
        "feedback": [channel],
        "simulation": {"duration_s": 40.0, "seed": 29, "surrogate_q_factor": 1e3, "initial_state": "rest"},
        "sweep": {"gain_factors": [0.0], "realizations": 30},
    }
    scenario = parse_scenario(data)
    mode = scenario.simulated_modes()[0]
    config = scenario.sim_config()
    fb = FeedbackConfig.model_validate(channel)
    gains = [gain_for_damping(mode, fb, config.dt, r) for r in ratios]
    assert all(loop_is_stable(mode, fb.model_copy(update={"gain": g}), config.dt) for g in gains)

    data["sweep"]["gain_factors"] = gains
    measured = time_domain_temperatures(parse_scenario(data))
    for ratio, t_time in zip(ratios, measured):
        assert t_time == pytest.approx(mode.t_env / (1 + ratio), rel=0.15)


@pytest.mark.parametrize("name, label, preset", [("observed_mode3", "y", "mode3"), ("observed_mode4", "x", "mode4")])
def test_observed_operating_point_is_reproduced(name, label, preset):
    scenario = load_scenario(name)
    point = observed_preset(preset)
    mode = scenario.simulated_modes()[0]
    results = run_points(scenario, keep_trajectory=True)[0]
    summary = average_point(results, scenario)
    entry = summary["modes"][label]
    assert entry["gain"] == point.gain
    assert entry["t_mode_time_k"] == pytest.approx(point.t_mode, rel=0.15)

    rms = np.sqrt(np.mean([np.mean(r["trajectory"].x[label] ** 2) for r in results]))
    assert rms == pytest.approx(rms_from_temperature(point.t_mode, mode), rel=0.15)
    assert rms == pytest.approx(point.a_rms, rel=0.15)

    gamma_total = mode.gamma0 * mode.t_env / point.t_mode
    band = integrate_band(summary["spectra"][label], mode, gamma_total, n_linewidths=scenario.spectral.n_linewidths)
    assert band.t_mode_lorentz == pytest.approx(point.t_mode, rel=0.15)
    assert band.a_rms == pytest.approx(point.a_rms, rel=0.15)
