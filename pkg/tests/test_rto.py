import json
from dataclasses import replace

import numpy as np
import pytest

import controllers.rto
from controllers.estimation import IdentificationError
from controllers.rto import (ALGORITHMS, CSV_COLUMNS, IterationRecord, ModifierSet,
                             OptimizationError, OptimizationSpec, OptimizerConfig, PlantGradients,
                             ProposedRun, RunConfig, RunToRun, TerminationConfig,
                             estimate_plant_gradients, fd_hessian, kkt_report, optimize_model,
                             run_modifier_adaptation, run_proposed, run_two_step)

SPEC = OptimizationSpec(V_max=1.0)


# --- Problem definition ---

def test_scaling_round_trip_and_bounds():
    z = SPEC.scale([50.5, 0.155])
    np.testing.assert_allclose(z, [0.5, 0.5])
    np.testing.assert_allclose(SPEC.unscale([0.0, 1.0]), [1.0, 0.3])
    assert SPEC.contains([1.0, 0.3])
    assert not SPEC.contains([0.5, 0.1])
    with pytest.raises(ValueError):
        OptimizationSpec(V_max=120.0, S0_bounds=(10.0, 5.0))
    with pytest.raises(ValueError):
        OptimizationSpec(V_max=0.0)
    assert OptimizationSpec(V_max=float("inf")).V_max == float("inf")


def test_objective_and_constraint_from_samples():
    spec = OptimizationSpec(V_max=120.0)
    y = np.array([[1.0, 0.5, 3.0], [2.0, 4.0, 1.0]])
    phi, g = spec.evaluate(y, np.array([101.0, 110.0]))
    assert phi == -440.0
    assert g == -10.0


def test_modifier_filter():
    previous = ModifierSet(lambda_phi=[1.0, 1.0], lambda_g=[0.0, 2.0], eps_g=4.0, filter_gain=0.25)
    raw = ModifierSet(lambda_phi=[5.0, -3.0], lambda_g=[4.0, 2.0], eps_g=0.0, filter_gain=0.25)
    filtered = previous.filtered(raw)
    np.testing.assert_allclose(filtered.lambda_phi, [2.0, 0.0])
    np.testing.assert_allclose(filtered.lambda_g, [1.0, 2.0])
    assert filtered.eps_g == pytest.approx(3.0)
    full = replace(previous, filter_gain=1.0).filtered(raw)
    np.testing.assert_array_equal(full.stacked, raw.stacked)
    with pytest.raises(ValueError):
        ModifierSet(filter_gain=0.0)
    with pytest.raises(ValueError):
        ModifierSet(lambda_phi=[np.inf, 0.0])


# --- Model optimization ---

def bowl(center, curvature=(1.0, 1.0), limit=None):
    """phi = sum c_i (z_i - center_i)^2 + 1 in scaled units; g = F - limit (or -1)."""
    center = np.asarray(center)

    def evaluate(u):
        z = SPEC.scale(u)
        phi = float(np.sum(np.asarray(curvature) * (z - center) ** 2)) + 1.0
        g = -1.0 if limit is None else float(u[1] - limit)
        return phi, g
    return evaluate


def test_optimize_model_finds_interior_minimum():
    result = optimize_model(bowl([0.4, 0.3]), SPEC, [50.0, 0.1])
    np.testing.assert_allclose(SPEC.scale(result.u), [0.4, 0.3], atol=1e-3)
    assert result.phi == pytest.approx(1.0, abs=1e-5)
    assert result.g <= 0


def test_optimize_model_enforces_constraint():
    result = optimize_model(bowl([0.4, 0.8], limit=0.1), SPEC, [20.0, 0.05])
    assert result.g <= 1e-6 * SPEC.V_max
    assert result.u[1] == pytest.approx(0.1, abs=1e-3)
    assert SPEC.scale(result.u)[0] == pytest.approx(0.4, abs=1e-2)


def test_optimize_model_reports_infeasibility():
    def never_feasible(u):
        return 0.0, 1.0
    with pytest.raises(OptimizationError):
        optimize_model(never_feasible, SPEC, [50.0, 0.1], cfg=OptimizerConfig(max_escalations=1))


def test_optimize_model_rejects_start_outside_box():
    with pytest.raises(ValueError):
        optimize_model(bowl([0.5, 0.5]), SPEC, [500.0, 0.1])


def test_modifiers_shift_the_optimum():
    u_ref = SPEC.unscale([0.5, 0.5])
    modifiers = ModifierSet(lambda_phi=[0.2, 0.0], lambda_g=[0.0, 0.0], eps_g=0.0)
    result = optimize_model(bowl([0.5, 0.5]), SPEC, u_ref, modifiers=modifiers, u_ref=u_ref)
    # d/dz (z - 0.5)^2 + 0.2 z = 0  ->  z = 0.4
    np.testing.assert_allclose(SPEC.scale(result.u), [0.4, 0.5], atol=1e-3)


# --- Plant gradients and KKT ---

def linear_measure(a, b, offset=0.0):
    def measure(u, probe):
        z = SPEC.scale(u)
        return float(a @ z) + offset, float(b @ z)
    return measure


def test_plant_gradients_forward_difference():
    a, b = np.array([-3.0, 2.0]), np.array([0.0, 1.0])
    grads = estimate_plant_gradients([20.0, 0.1], SPEC, linear_measure(a, b))
    np.testing.assert_allclose(grads.dphi, a, rtol=1e-9)
    np.testing.assert_allclose(grads.dg, b, atol=1e-9)
    assert grads.n_batches == 3
    assert grads.flags == ()


def test_plant_gradients_backward_at_upper_bound():
    a, b = np.array([-3.0, 2.0]), np.array([0.0, 1.0])
    grads = estimate_plant_gradients([100.0, 0.1], SPEC, linear_measure(a, b))
    np.testing.assert_allclose(grads.dphi, a, rtol=1e-9)
    assert grads.flags == ("backward_difference:S0",)


def test_plant_gradients_use_distinct_probes():
    probes = []

    def measure(u, probe):
        probes.append(probe)
        return 0.0, 0.0
    grads = estimate_plant_gradients([20.0, 0.1], SPEC, measure, central=True)
    assert probes == [0, 1, 2, 3, 4]
    assert grads.n_batches == 5


def test_kkt_report_active_constraint():
    plant = PlantGradients(dphi=np.array([-2.0, 0.0]), dg=np.array([1.0, 0.0]), phi=-10.0, g=0.0)
    report = kkt_report([50.0, 0.1], bowl([0.4, 0.3]), plant, SPEC)
    assert report.constraint_active
    assert report.mu == pytest.approx(2.0)
    assert report.stationarity_residual == pytest.approx(0.0, abs=1e-12)
    assert report.plant_gradient_norm == pytest.approx(2.0)
    assert report.hessian_pd


def test_kkt_report_inactive_constraint():
    plant = PlantGradients(dphi=np.array([3.0, 4.0]), dg=np.array([1.0, 0.0]), phi=-2.0, g=-0.5)
    report = kkt_report([50.0, 0.1], bowl([0.4, 0.3]), plant, SPEC, hessian=False)
    assert not report.constraint_active
    assert report.mu == 0.0
    assert report.stationarity_residual == pytest.approx(2.5)
    assert report.hessian_phi_fd is None
    assert json.loads(json.dumps(report.to_dict()))["mu"] == 0.0


def test_fd_hessian_of_quadratic():
    H = fd_hessian(lambda z: 3.0 * z[0] ** 2 + z[0] * z[1] + 2.0 * z[1] ** 2, np.array([0.5, 0.5]), 0.01)
    np.testing.assert_allclose(H, [[6.0, 1.0], [1.0, 4.0]], atol=1e-6)


@pytest.mark.parametrize("z", [[0.0, 1.0], [1.0, 0.0], [0.005, 0.995], [0.5, 1.0]])
def test_fd_hessian_stays_in_the_box(z):
    seen = []

    def quadratic(zz):
        seen.append(np.array(zz, dtype=float))
        return 3.0 * zz[0] ** 2 + zz[0] * zz[1] + 2.0 * zz[1] ** 2

    H = fd_hessian(quadratic, np.array(z), 0.01)
    np.testing.assert_allclose(H, [[6.0, 1.0], [1.0, 4.0]], atol=1e-6)
    points = np.array(seen)
    assert np.all(points >= 0.0) and np.all(points <= 1.0)
    assert any(np.array_equal(p, z) for p in points)


def test_config_validation():
    with pytest.raises(ValueError):
        TerminationConfig(max_iterations=0)
    with pytest.raises(ValueError):
        RunConfig(filter_gain=1.5)
    assert RunConfig().to_dict()["termination"]["max_iterations"] == 40


# --- Drivers ---

def test_proposed_run_on_fast_scenario(fast_scenario, fast_cfg):
    result = run_proposed(fast_scenario, fast_cfg, seed=1)
    assert not result.failed
    assert result.iterations == 2
    first, second = result.records
    assert first.kl_iden is None
    assert second.kl_iden is not None and second.kl_iden >= 0.0
    assert first.kl_corr >= 0.0
    np.testing.assert_array_equal(second.u, first.u_next)
    for record in result.records:
        assert fast_scenario.spec.contains(record.u_next)
        assert record.max_trunc <= fast_cfg.correction.eps_trunc_max
        assert record.match_objective <= record.match_objective_at_zero
        lower, upper = fast_scenario.theta_bounds
        assert np.all(record.theta_prime >= np.array(lower) - 1e-12)
        assert np.all(record.theta_prime <= np.array(upper) + 1e-12)
        assert record.kkt is not None
    assert len(result.ledger.history) == 2
    np.testing.assert_allclose(result.ledger.C,
                               sum(e.c for e in result.ledger.history), atol=1e-12)


def test_runs_are_reproducible(fast_scenario, fast_cfg):
    a = run_two_step(fast_scenario, fast_cfg, seed=3)
    b = run_two_step(fast_scenario, fast_cfg, seed=3)
    assert a.to_json() == b.to_json()
    assert a.to_csv() == b.to_csv()


def test_modifier_adaptation_run(fast_scenario, fast_cfg):
    result = run_modifier_adaptation(fast_scenario, fast_cfg, seed=0, K=0.5)
    assert not result.failed
    assert result.config["filter_gain"] == 0.5
    first = result.records[0]
    assert first.modifiers is not None
    np.testing.assert_array_equal(first.theta_prime, fast_scenario.model.theta)
    assert result.ledger is None


def test_run_csv_layout(fast_scenario, fast_cfg):
    result = run_modifier_adaptation(fast_scenario, replace(
        fast_cfg, termination=TerminationConfig(max_iterations=1)), seed=0)
    lines = result.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 2
    assert lines[1].startswith("1,")


def test_failure_keeps_partial_result(fast_scenario, fast_cfg, monkeypatch):
    original = ProposedRun.iterate

    def failing(self, k, u):
        if k == 2:
            raise RuntimeError("boom")
        return original(self, k, u)

    monkeypatch.setattr(ProposedRun, "iterate", failing)
    result = run_proposed(fast_scenario, fast_cfg, seed=0)
    assert result.failed
    assert result.iterations == 1
    assert "iteration 2" in result.message and "boom" in result.message
    np.testing.assert_array_equal(result.final_u, result.records[0].u_next)


class ScriptedRun(RunToRun):
    algorithm = "scripted"
    masses = [10.0, 12.0, 11.0]

    def iterate(self, k, u):
        record = IterationRecord(k=k, u=np.asarray(u, dtype=float), u_next=np.asarray(u, dtype=float),
                                 plant_phi=-self.masses[k - 1])
        return record, ("done" if k == len(self.masses) else None)


def test_objective_regression_is_flagged(fast_scenario, fast_cfg):
    cfg = replace(fast_cfg, termination=TerminationConfig(max_iterations=5))
    result = ScriptedRun(fast_scenario, cfg).run()
    assert result.termination == "done"
    assert [r.flags for r in result.records] == [[], [], ["objective_regressed"]]


def test_algorithm_registry():
    assert set(ALGORITHMS) == {"proposed", "two-step", "ma"}


@pytest.mark.slow
@pytest.mark.parametrize("algorithm", ["proposed", "two-step", "ma"])
def test_full_length_runs_improve_on_the_initial_batch(uncalibrated, algorithm):
    result = ALGORITHMS[algorithm](uncalibrated, RunConfig(termination=TerminationConfig(max_iterations=8)), 0)
    assert not result.failed
    masses = [r.plant_product_mass for r in result.records]
    assert max(masses[1:]) > masses[0]
    assert uncalibrated.spec.contains(result.final_u)


@pytest.mark.parametrize("runner", [run_proposed, run_two_step])
def test_identification_failure_keeps_previous_parameters(fast_scenario, fast_cfg, monkeypatch, runner):
    original = controllers.rto.identify
    calls = []

    def failing_second_batch(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise IdentificationError("no start converged")
        return original(*args, **kwargs)

    monkeypatch.setattr(controllers.rto, "identify", failing_second_batch)
    result = runner(fast_scenario, fast_cfg, seed=0)
    assert not result.failed
    assert result.iterations == 2
    first, second = result.records
    assert "identification_failed" not in first.flags
    assert "identification_failed" in second.flags
    np.testing.assert_array_equal(second.theta_iden, second.theta_prev)
    assert result.termination == "max_iterations"


def test_iteration_records_chain_together(fast_scenario, fast_cfg):
    cfg = replace(fast_cfg, termination=TerminationConfig(max_iterations=3))
    result = run_proposed(fast_scenario, cfg, seed=2)
    assert not result.failed
    np.testing.assert_array_equal(result.records[0].theta_prev, fast_scenario.model.theta)
    np.testing.assert_array_equal(result.records[0].u, fast_scenario.u_init)
    for record in result.records:
        np.testing.assert_allclose(record.theta_iden, record.theta_prev + record.dtheta_iden, rtol=1e-12)
        np.testing.assert_allclose(record.theta_prime, record.theta_iden + record.dtheta_corr, rtol=1e-12)
    for before, after in zip(result.records, result.records[1:]):
        np.testing.assert_array_equal(after.theta_prev, before.theta_prime)
        np.testing.assert_array_equal(after.u, before.u_next)
    for record, entry in zip(result.records, result.ledger.history):
        assert entry.k == record.k
        np.testing.assert_array_equal(entry.dtheta, record.dtheta_corr)
