import math

import numpy as np
import pytest
from pydantic import ValidationError

from levitwin.core.errors import ParameterError
from levitwin.core.isolation import (
    IsolationChain,
    IsolationStage,
    attenuation_db,
    bode_table,
    coupling_partner,
    disturbance_profile,
    resonance_catalog,
    transmissibility,
)
from levitwin.core.presets import isolation_preset, mode_preset


@pytest.fixture
def chain():
    return isolation_preset()


def with_damping(chain, zeta):
    stages = [s.model_copy(update={"damping_axial": zeta, "damping_lateral": zeta}) for s in chain.stages]
    return chain.model_copy(update={"stages": stages})


def test_eigenfrequencies_of_the_preset(chain):
    catalog = resonance_catalog(chain)
    assert len(catalog) == 6
    lateral = [r.f for r in catalog if r.axis == "lateral"]
    axial = [r.f for r in catalog if r.axis == "axial"]
    assert lateral[0] == pytest.approx(0.6, rel=0.05)
    assert axial[0] == pytest.approx(1.0, rel=0.05)
    assert axial[-1] == pytest.approx(10.5, rel=0.10)
    assert [r.f for r in catalog] == sorted(r.f for r in catalog)


def test_lateral_attenuation_in_sensor_band(chain):
    lo, hi = attenuation_db(chain, 50.0, 70.0, axis="lateral")
    assert 160.0 <= lo <= hi <= 180.0


def test_high_frequency_slope_of_three_stages(chain):
    lightly_damped = with_damping(chain, 1e-4)
    ratio = np.abs(transmissibility(lightly_damped, [50.0, 500.0], axis="lateral"))
    slope = 20 * math.log10(ratio[0] / ratio[1])
    assert slope == pytest.approx(120.0, abs=1.0)


def test_single_stage_matches_closed_form():
    stage = IsolationStage(mass_kg=2.0, k_axial_n_per_m=800.0, k_lateral_n_per_m=200.0,
                           damping_ratio_axial=0.01, damping_ratio_lateral=0.01)
    single = IsolationChain(stages=[stage], base_axis="axial")
    f = np.array([0.5, 3.0, 40.0])
    w = 2 * np.pi * f
    c = 2 * 0.01 * math.sqrt(800.0 * 2.0)
    expected = (800.0 + 1j * w * c) / (800.0 - 2.0 * w ** 2 + 1j * w * c)
    np.testing.assert_allclose(transmissibility(single, f), expected, rtol=1e-10)

    f_n = math.sqrt(800.0 / 2.0) / (2 * math.pi)
    peak = abs(transmissibility(single, f_n)[0])
    assert 20 * math.log10(peak) == pytest.approx(20 * math.log10(1 / (2 * 0.01)), abs=0.01)


def test_chain_needs_a_stage():
    with pytest.raises(ValidationError):
        IsolationChain(stages=[])


def test_short_circuit_floor_caps_attenuation(chain):
    floored = chain.model_copy(update={"transmissibility_floor": 1e-6})
    lo, hi = attenuation_db(floored, 50.0, 70.0, axis="lateral")
    assert lo == pytest.approx(120.0, abs=0.5)
    assert hi == pytest.approx(120.0, abs=0.5)


def test_invalid_frequencies(chain):
    with pytest.raises(ParameterError):
        transmissibility(chain, [0.0, 1.0])
    with pytest.raises(ParameterError):
        attenuation_db(chain, 70.0, 50.0)


def test_disturbance_profile_is_filtered_by_the_chain(chain):
    tones = disturbance_profile(chain, base_force=1e-12)
    assert len(tones) == 10 + 3
    assert tones[0].f == pytest.approx(1.401)
    assert tones[9].f == pytest.approx(14.01)
    assert tones[9].force_amplitude < 1e-3 * 1e-12
    assert len(disturbance_profile(chain, include_resonances=False)) == 10
    assert disturbance_profile(chain, n_harmonics=0, include_resonances=False) == []
    with pytest.raises(ParameterError):
        disturbance_profile(chain, fundamental=0.0)


def test_coupling_partner_targets_the_sideband():
    partner = coupling_partner(mode_preset("mode3"), 49.67, 1e-6, 2e4)
    assert partner.partner_f == pytest.approx(0.92)
    assert partner.mode == "y"
    assert partner.depth == pytest.approx(0.02)


def test_bode_table_columns(chain):
    table = bode_table(chain, n_points=50)
    assert list(table.columns) == ["f_hz", "mag_db_axial", "mag_db_lateral", "phase_rad_axial", "phase_rad_lateral"]
    assert len(table) == 50
    assert table["mag_db_lateral"].iloc[-1] < -100


def test_attenuation_keeps_growing_above_the_resonances(chain):
    f_top = max(r.f for r in resonance_catalog(chain))
    grid = np.geomspace(3 * f_top, 1000.0, 500)
    for axis in ("axial", "lateral"):
        magnitude = np.abs(transmissibility(chain, grid, axis=axis))
        assert np.all(np.diff(magnitude) < 0)


def test_extra_stage_adds_a_mode_per_axis(chain):
    extra = IsolationStage(mass_kg=0.5, k_axial_n_per_m=300.0, k_lateral_n_per_m=100.0)
    longer = chain.model_copy(update={"stages": list(chain.stages) + [extra]})
    before, after = resonance_catalog(chain), resonance_catalog(longer)
    for axis in ("axial", "lateral"):
        assert len([r for r in after if r.axis == axis]) == len([r for r in before if r.axis == axis]) + 1
