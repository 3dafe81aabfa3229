from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from controllers.dynamics import (InputConditions, ModelParameters, PlantParameters,
                                  sample_outputs, sample_times, simulate_model, simulate_plant,
                                  step_count, terminal_states)


def reference_rhs(t, x, p: PlantParameters, F: float, K_H: float):
    X, P, S, V = x
    growth = p.mu_X * S * X / (p.K_X * X + S)
    production = p.mu_P * S * X / (p.K_P + S + S * S / p.K_I)
    dV = F - p.evap_rate * V
    D = dV / V
    return [growth - X * D,
            production - K_H * P - P * D,
            -growth / p.Y_XS - production / p.Y_PS - p.m_X * X + F * p.s_f / V - S * D,
            dV]


def reference_final(p, u, K_H):
    sol = solve_ivp(reference_rhs, (0.0, u.t_f), [u.X0, u.P0, u.S0, u.V0], method="DOP853",
                    rtol=1e-12, atol=1e-12, args=(p, u.F, K_H))
    assert sol.success
    return sol.y[:, -1]


# Substrate-rich short batch: no depletion, smooth right-hand side.
RICH = InputConditions(S0=55.0, F=0.1, t_f=20.0)


def test_rk4_matches_adaptive_reference():
    p = PlantParameters()
    traj = simulate_plant(p, RICH, grid_step=0.1)
    np.testing.assert_allclose(traj.final, reference_final(p, RICH, p.K_H), rtol=1e-7)


def test_rk4_is_fourth_order():
    p = PlantParameters()
    exact = reference_final(p, RICH, p.K_H)
    coarse = abs(simulate_plant(p, RICH, grid_step=2.0).final[0] - exact[0])
    fine = abs(simulate_plant(p, RICH, grid_step=1.0).final[0] - exact[0])
    assert 13.9 <= coarse / fine < 22.0


# Nominal initial batch: feed-limited growth keeps S above zero, so the unswitched
# right-hand side is a valid reference over the whole horizon.
@pytest.mark.parametrize("t_f", [150.0, 300.0])
def test_rk4_on_the_nominal_batch(t_f):
    p = PlantParameters()
    u = InputConditions(S0=1.0, F=0.04, t_f=t_f)
    traj = simulate_plant(p, u, grid_step=0.1)
    assert traj.states[1:, 2].min() > 0.0
    np.testing.assert_allclose(traj.final, reference_final(p, u, p.K_H), rtol=1e-5)
    model = simulate_model(ModelParameters.nominal(p), u, grid_step=0.1)
    np.testing.assert_allclose(model.final, reference_final(p, u, 0.0), rtol=1e-5)


def test_model_equals_plant_without_hydrolysis():
    p = replace(PlantParameters(), K_H=0.0)
    u = InputConditions()
    plant = simulate_plant(p, u)
    model = simulate_model(ModelParameters.nominal(p), u)
    np.testing.assert_array_equal(plant.states, model.states)


def test_hydrolysis_removes_product():
    p = PlantParameters()
    u = InputConditions(t_f=50.0)
    plant = simulate_plant(p, u, grid_step=0.5)
    model = simulate_model(ModelParameters.nominal(p), u, grid_step=0.5)
    assert plant.final[1] < model.final[1]
    np.testing.assert_allclose(plant.final[3], model.final[3])


def test_volume_has_closed_form():
    p = PlantParameters()
    u = InputConditions(F=0.2, t_f=100.0)
    traj = simulate_plant(p, u, grid_step=0.5)
    e = p.evap_rate
    expected = u.F / e + (u.V0 - u.F / e) * np.exp(-e * u.t_f)
    assert traj.final[3] == pytest.approx(expected, rel=1e-10)


def test_states_stay_non_negative():
    traj = simulate_plant(PlantParameters(), InputConditions(S0=1.0, F=0.01, t_f=150.0))
    assert np.all(traj.states >= 0.0)
    assert traj.grid.size == 1501
    assert traj.grid_step == pytest.approx(0.1)


def test_terminal_states_match_scalar_runs():
    p = PlantParameters()
    u = InputConditions(t_f=50.0)
    S0 = np.array([1.0, 30.0, 80.0])
    F = np.array([0.01, 0.1, 0.25])
    final = terminal_states(p, p.K_H, u, S0, F, grid_step=0.5)
    assert final.shape == (4, 3)
    for i in range(3):
        scalar = simulate_plant(p, u.with_decision((S0[i], F[i])), grid_step=0.5).final
        np.testing.assert_allclose(final[:, i], scalar, rtol=1e-12)


def test_grid_must_divide_horizon():
    with pytest.raises(ValueError):
        step_count(150.0, 0.7)
    with pytest.raises(ValueError):
        simulate_plant(PlantParameters(), InputConditions(t_f=10.05), grid_step=0.1)


def test_invalid_parameters_rejected():
    with pytest.raises(ValueError):
        PlantParameters(mu_X=-1.0)
    with pytest.raises(ValueError):
        PlantParameters(K_H=-0.01)
    with pytest.raises(ValueError):
        ModelParameters(theta=(0.15, 0.0))
    with pytest.raises(ValueError):
        InputConditions(F=-0.1)
    PlantParameters(K_H=0.0)


def test_sample_times_exclude_start_and_include_end():
    np.testing.assert_allclose(sample_times(150.0, 10.0), np.arange(10.0, 151.0, 10.0))
    times = sample_times(155.0, 10.0)
    assert times[-1] == 155.0
    assert times.size == 16


def test_sampling_is_noise_free_by_default():
    traj = simulate_plant(PlantParameters(), InputConditions(t_f=50.0), grid_step=0.5)
    meas = sample_outputs(traj, 10.0)
    np.testing.assert_array_equal(meas.y_m, traj.states[[20, 40, 60, 80, 100], :3])
    np.testing.assert_array_equal(meas.volume, traj.states[[20, 40, 60, 80, 100], 3])
    assert meas.final_product_mass == pytest.approx(traj.final[1] * traj.final[3])


def test_sampling_noise_is_seeded():
    traj = simulate_plant(PlantParameters(), InputConditions(t_f=50.0), grid_step=0.5)
    a = sample_outputs(traj, 10.0, noise_sigma_rel=0.05, seed=3)
    b = sample_outputs(traj, 10.0, noise_sigma_rel=0.05, seed=3)
    c = sample_outputs(traj, 10.0, noise_sigma_rel=0.05, seed=4)
    np.testing.assert_array_equal(a.y_m, b.y_m)
    assert not np.array_equal(a.y_m, c.y_m)
    with pytest.raises(ValueError):
        sample_outputs(traj, 10.0, noise_sigma_rel=-0.1)
    with pytest.raises(ValueError):
        sample_outputs(traj, 0.7)


def test_sampling_noise_has_the_requested_spread():
    traj = simulate_plant(PlantParameters(), InputConditions(t_f=100.0), grid_step=0.5)
    exact = sample_outputs(traj, 1.0).y_m
    ratios = np.concatenate([
        (sample_outputs(traj, 1.0, noise_sigma_rel=0.01, seed=seed).y_m / exact - 1.0).ravel()
        for seed in range(34)
    ])
    assert ratios.size >= 10_000
    assert np.std(ratios) == pytest.approx(0.01, rel=0.05)
    assert abs(np.mean(ratios)) < 4 * 0.01 / np.sqrt(ratios.size)
