from dataclasses import replace

import numpy as np
import pytest

from controllers.dynamics import MeasurementSet
from controllers.estimation import EstimationConfig
from controllers.rto import RunConfig, TerminationConfig
from controllers.scenario_manager import ScenarioManager


@pytest.fixture(scope="session")
def manager():
    return ScenarioManager()


@pytest.fixture(scope="session")
def uncalibrated(manager):
    return manager.load("uncalibrated")


@pytest.fixture(scope="session")
def fast_scenario(uncalibrated):
    """50 h batch on a 0.5 h grid: five samples, about a hundred RK4 steps per simulation."""
    return replace(uncalibrated, name="fast",
                   inputs=replace(uncalibrated.inputs, t_f=50.0),
                   spec=replace(uncalibrated.spec, V_max=105.0),
                   grid_step=0.5)


@pytest.fixture
def fast_cfg():
    return RunConfig(estimation=EstimationConfig(n_starts=2, max_iter=1000, xatol=1e-6, fatol=1e-12),
                     termination=TerminationConfig(max_iterations=2),
                     kkt_hessian=False)


LINEAR_TIMES = np.arange(1.0, 6.0)


def linear_predict(theta):
    """Outputs linear in theta: columns t*K_X, t*K_I, t*(K_X + K_I)."""
    a, b = float(theta[0]), float(theta[1])
    t = LINEAR_TIMES
    return np.column_stack([a * t, b * t, (a + b) * t])


@pytest.fixture
def linear_measurements():
    def make(theta, perturbation=0.0):
        y = linear_predict(theta)
        if perturbation:
            pattern = np.array([[1.0, -1.0, 0.5], [-0.5, 1.0, -1.0], [1.0, 0.5, -0.5],
                                [-1.0, -0.5, 1.0], [0.5, 1.0, -1.0]])
            y = y + perturbation * pattern
        return MeasurementSet(sample_grid=LINEAR_TIMES.copy(), y_m=y, volume=np.full(5, 100.0))
    return make


@pytest.fixture(scope="session")
def default_study(manager):
    """Shipped default scenario on a 0.5 h grid, for the full-length studies."""
    return replace(manager.load("default"), grid_step=0.5)


@pytest.fixture(scope="session")
def study_cfg():
    return RunConfig(estimation=EstimationConfig(n_starts=2),
                     termination=TerminationConfig(max_iterations=40),
                     kkt_hessian=False)
