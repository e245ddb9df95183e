import math

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError
from scipy.optimize import curve_fit

from levitwin.core.controller import FeedbackConfig, gain_for_damping, pole_radius, stable_gain_limit
from levitwin.core.errors import IntegrationError, ParameterError
from levitwin.core.model import KB
from levitwin.core.presets import mode_preset
from levitwin.core.propagator import discretize
from levitwin.core.simulate import (
    DisturbanceTone,
    NonlinearCoupling,
    SimConfig,
    Trajectory,
    apply_coupling,
    derive_seed,
    detector,
    run,
)
from levitwin.core.spectral import welch_psd


@pytest.fixture
def mode3():
    return mode_preset("mode3")


def config(modes, **kwargs):
    data = {"dt_s": 1 / (50 * max(m.f0 for m in modes)), "duration_s": 100 / min(m.f0 for m in modes),
            "seed": 11, "modes": modes}
    data.update(kwargs)
    return SimConfig.model_validate(data)


def test_discretization_preserves_stationary_covariance(mode3):
    for mode in (mode3, mode3.surrogate(100)):
        disc = discretize(mode, 1 / (50 * mode.f0))
        expected = np.diag([KB * mode.t_env / mode.spring_constant, KB * mode.t_env / mode.mass])
        np.testing.assert_allclose(disc.sigma_inf, expected, rtol=1e-8, atol=1e-8 * expected.max())
        propagated = disc.phi @ disc.sigma_inf @ disc.phi.T + disc.q_d
        np.testing.assert_allclose(propagated, disc.sigma_inf, rtol=1e-6, atol=1e-6 * expected.max())
        assert np.all(np.linalg.eigvalsh(disc.q_d) >= -1e-12 * np.abs(disc.q_d).max())


def test_derive_seed_is_deterministic_and_distinct():
    assert derive_seed(5, 3) == derive_seed(5, 3)
    assert len({derive_seed(5, i) for i in range(100)}) == 100
    assert 0 <= derive_seed(2 ** 64 - 1, 7) < 2 ** 64


def test_step_size_must_resolve_the_fastest_mode(mode3):
    with pytest.raises(ValidationError):
        config([mode3], dt_s=1 / (20 * mode3.f0))


def test_duration_must_cover_hundred_periods(mode3):
    with pytest.raises(ValidationError):
        config([mode3], duration_s=1.0)
    assert config([mode3], duration_s=1.0, allow_short_duration=True).n_steps > 0


def test_references_must_resolve(mode3):
    fb = FeedbackConfig(mode="x", target_f_hz=50.0, gain=1.0, demod_bandwidth_hz=8.0)
    with pytest.raises(ValidationError):
        config([mode3], feedback=[fb])


def test_one_feedback_channel_per_mode(mode3):
    fb = FeedbackConfig(target_f_hz=50.59, gain=1.0, demod_bandwidth_hz=8.0)
    with pytest.raises(ValidationError):
        config([mode3], feedback=[fb, fb])


def test_coupling_must_stay_perturbative():
    with pytest.raises(ValidationError):
        NonlinearCoupling(partner_f_hz=0.92, partner_amplitude_m=1e-5, coupling_coefficient_per_m=2e4)


def test_same_seed_same_trajectory(mode3):
    cfg = config([mode3.surrogate(100)], detector_noise_asd_m_per_rthz=1e-12)
    a, b = run(cfg), run(cfg)
    np.testing.assert_array_equal(a.x["y"], b.x["y"])
    np.testing.assert_array_equal(a.detector_voltage_equivalent, b.detector_voltage_equivalent)
    assert not np.array_equal(run(cfg, run_index=1).x["y"], a.x["y"])


def test_sample_count_and_time_grid(mode3):
    cfg = config([mode3])
    traj = run(cfg)
    assert traj.t.size == cfg.n_steps == math.floor(cfg.duration / cfg.dt * (1 + 1e-12))
    assert traj.sample_rate == pytest.approx(cfg.sample_rate)


def test_equipartition_without_feedback(mode3):
    mode = mode3.surrogate(10)
    traj = run(config([mode], duration_s=100.0))
    t_mode = mode.spring_constant * np.mean(traj.x["y"] ** 2) / KB
    assert t_mode == pytest.approx(mode.t_env, rel=0.10)


def test_feedback_cools_the_mode(mode3):
    mode = mode3.surrogate(1e3)
    gain = 3 * mode.gamma0 * mode.mass * mode.omega0
    fb = FeedbackConfig(target_f_hz=mode.f0, gain=gain, demod_bandwidth_hz=8.0)
    traj = run(config([mode], duration_s=40.0, feedback=[fb], seed=4))
    x = traj.x["y"][traj.t > 10.0]
    assert mode.spring_constant * np.mean(x ** 2) / KB < 0.5 * mode.t_env
    assert "y" in traj.feedback_force


def test_silent_mode_stays_at_rest(mode3):
    traj = run(config([mode3], thermal_noise=False, initial_state="rest"))
    assert not np.any(traj.x["y"])
    assert not np.any(traj.detector_voltage_equivalent)


def test_resonant_drive_work_balances_energy(mode3):
    tone = DisturbanceTone(f_hz=mode3.f0, force_amplitude_n=1e-12)
    traj = run(config([mode3], duration_s=2.0, allow_short_duration=True, thermal_noise=False,
                      initial_state="rest", disturbances=[tone]))
    budget = traj.energy_budget()["y"]
    assert budget["delta_energy"] > 0
    assert budget["disturbance"] == pytest.approx(budget["delta_energy"], rel=1e-3)
    assert budget["feedback"] == 0.0


def test_two_modes_are_simulated_together():
    modes = [mode_preset("mode3").surrogate(100), mode_preset("mode4").surrogate(100)]
    traj = run(config(modes, detector_noise_asd_m_per_rthz=1e-13))
    assert traj.labels == ["y", "x"]
    noise = traj.detector_voltage_equivalent - traj.x["y"] - traj.x["x"]
    assert np.std(noise) == pytest.approx(1e-13 * math.sqrt(traj.sample_rate / 2), rel=0.05)


def test_anti_damping_feedback_diverges(mode3):
    mode = mode3.surrogate(1e3)
    gain = 20 * mode.mass * mode.omega0
    fb = FeedbackConfig(target_f_hz=mode.f0, gain=gain, phase_rad=-math.pi / 2, demod_bandwidth_hz=8.0)
    with pytest.raises(IntegrationError) as excinfo:
        run(config([mode], duration_s=5.0, feedback=[fb]))
    assert excinfo.value.mode == "y"
    assert excinfo.value.step > 0


def test_coupling_force_is_modulated_stiffness(mode3):
    coupling = NonlinearCoupling(partner_f_hz=0.92, partner_amplitude_m=1e-6, coupling_coefficient_per_m=2e4)
    t = np.linspace(0, 1, 11)
    x = np.full_like(t, 1e-12)
    expected = -mode3.spring_constant * 2e4 * 1e-6 * np.sin(2 * np.pi * 0.92 * t) * 1e-12
    np.testing.assert_allclose(apply_coupling(x, coupling, mode3, t), expected)


def test_detector_adds_white_noise():
    x = np.zeros(200000)
    y = detector(x, 1e-12, 1000.0, seed=1)
    assert np.std(y) == pytest.approx(1e-12 * math.sqrt(500.0), rel=0.01)
    np.testing.assert_array_equal(detector(x, 0.0, 1000.0), x)
    with pytest.raises(ParameterError):
        detector(x, -1.0, 1000.0)


def test_csv_export_header(mode3, tmp_path):
    fb = FeedbackConfig(target_f_hz=mode3.f0, gain=1e-4, demod_bandwidth_hz=8.0)
    traj = run(config([mode3], feedback=[fb]))
    path = traj.to_csv(tmp_path / "trajectory.csv")
    assert list(pd.read_csv(path, nrows=1).columns) == ["t_s", "x_m_y", "v_mps_y", "det_m", "ffb_n_y"]


def test_npz_export_is_lossless(mode3, tmp_path):
    tone = DisturbanceTone(f_hz=mode3.f0, force_amplitude_n=1e-15)
    traj = run(config([mode3], disturbances=[tone]))
    loaded = Trajectory.load_npz(traj.save_npz(tmp_path / "run.npz"))
    assert loaded.modes == traj.modes
    np.testing.assert_array_equal(loaded.x["y"], traj.x["y"])
    np.testing.assert_array_equal(loaded.disturbance_force["y"], traj.disturbance_force["y"])


def test_single_sample_run_keeps_its_step(mode3, tmp_path):
    dt = 1 / (50 * mode3.f0)
    cfg = config([mode3], duration_s=dt, allow_short_duration=True)
    traj = run(cfg)
    assert traj.t.size == 1
    assert traj.dt == cfg.dt
    assert traj.sample_rate == pytest.approx(cfg.sample_rate)
    assert Trajectory.load_npz(traj.save_npz(tmp_path / "one.npz")).dt == cfg.dt


def test_run_applies_the_coupling_force(mode3):
    coupling = NonlinearCoupling(partner_f_hz=0.92, partner_amplitude_m=1e-6, coupling_coefficient_per_m=2e4)
    traj = run(config([mode3.surrogate(100)], coupling=coupling))
    expected = apply_coupling(traj.x["y"], coupling, traj.mode("y"), traj.t)
    np.testing.assert_allclose(traj.coupling_force["y"], expected, rtol=1e-12, atol=0.0)


def test_gain_above_stability_limit_diverges(mode3):
    mode = mode3.surrogate(1e3)
    dt = 1 / (50 * mode.f0)
    base = FeedbackConfig(target_f_hz=mode.f0, gain=1.0, demod_bandwidth_hz=8.0)
    fb = base.model_copy(update={"gain": 2 * stable_gain_limit(mode, base, dt)})
    # 1e-9 m has to grow past 1e6 thermal RMS
    growth = math.log(1e6 * mode.thermal_rms / 1e-9)
    duration = 3 * growth / math.log(pole_radius(mode, fb, dt)) * dt
    cfg = config([mode], duration_s=max(duration, 2.0), allow_short_duration=True, feedback=[fb],
                 thermal_noise=False, initial_state="rest", initial_x_m=1e-9)
    with pytest.raises(IntegrationError):
        run(cfg)


def test_ring_down_frequency_and_decay_time(mode3):
    mode = mode3.surrogate(100)
    traj = run(config([mode], duration_s=2.0, allow_short_duration=True, thermal_noise=False,
                      initial_state="rest", initial_x_m=1e-9))

    def ring(t, amplitude, tau, f, phase):
        return amplitude * np.exp(-t / tau) * np.cos(2 * np.pi * f * t + phase)

    tau0 = 2 * mode.q_factor / mode.omega0
    (amplitude, tau, f, phase), _ = curve_fit(ring, traj.t, traj.x["y"] / 1e-9, p0=[1.0, tau0, mode.f0, 0.0])
    assert f == pytest.approx(mode.f0, rel=1e-3)
    assert tau == pytest.approx(tau0, rel=1e-3)


@pytest.mark.slow
def test_feedback_at_nine_times_intrinsic_damping_cools_tenfold(mode3):
    mode = mode3.surrogate(1e3)
    dt = 1 / (50 * mode.f0)
    fb = FeedbackConfig(target_f_hz=mode.f0, gain=1.0, demod_bandwidth_hz=20.0)
    fb = fb.model_copy(update={"gain": gain_for_damping(mode, fb, dt, 9.0)})
    cfg = config([mode], duration_s=40.0, feedback=[fb], initial_state="rest", seed=9)
    temperatures = [mode.spring_constant * np.mean(run(cfg, run_index=i).x["y"] ** 2) / KB for i in range(4)]
    assert np.mean(temperatures) == pytest.approx(mode.t_env / 10, rel=0.15)


def test_fluctuation_dissipation_over_an_ensemble(mode3):
    mode = mode3.surrogate(10)
    cfg = config([mode], seed=21)
    temperatures = np.array([mode.spring_constant * np.mean(run(cfg, run_index=i).x["y"] ** 2) / KB
                             for i in range(30)])
    sem = temperatures.std(ddof=1) / math.sqrt(temperatures.size)
    assert abs(temperatures.mean() - mode.t_env) < 3 * sem


def test_halving_the_step_keeps_driven_energy(mode3):
    tone = DisturbanceTone(f_hz=mode3.f0, force_amplitude_n=1e-12)
    energies = []
    for steps_per_period in (50, 100):
        cfg = config([mode3], dt_s=1 / (steps_per_period * mode3.f0), duration_s=2.0, allow_short_duration=True,
                     thermal_noise=False, initial_state="rest", disturbances=[tone])
        energies.append(run(cfg).energy_budget()["y"]["delta_energy"])
    assert energies[1] == pytest.approx(energies[0], rel=0.01)


def test_detector_floor_and_resonance_contrast(mode3):
    floor = welch_psd(detector(np.zeros(2 ** 18), 1e-12, 2500.0, seed=4), 2500.0, segment_length=2048)
    np.testing.assert_allclose(floor.psd[1:-1].mean(), 1e-24, rtol=0.02)

    mode = mode3.surrogate(100)
    traj = run(config([mode], duration_s=40.0, detector_noise_asd_m_per_rthz=1e-12, seed=6))
    spec = welch_psd(traj.detector_voltage_equivalent, traj.sample_rate, segment_length=int(4 * traj.sample_rate))
    peak = spec.psd[np.abs(spec.f - mode.f0) < 1.0].max()
    background = np.median(spec.psd[spec.f > 2 * mode.f0])
    assert background == pytest.approx(1e-24, rel=0.10)
    assert 10 * math.log10(peak / background) >= 20.0
