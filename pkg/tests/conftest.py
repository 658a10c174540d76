import numpy as np
import pytest

from epinet import Parameters, PhaseSchedule, SimConfig


def ground_truth() -> Parameters:
    """The simulation-study parameter values (rates per day)."""
    return Parameters(
        beta=0.2, exp_eta=float(np.exp(0.2)), phi=0.2, gamma=0.1, p_s=0.6,
        b_s=np.array([1.0, 1.0]),
        alpha=np.array([[6e-4, 6e-4, 6e-4], [6e-4, 2e-4, 6e-4]]),
        omega=np.array([[5e-3, 5e-3, 5e-3], [5e-3, 50e-3, 5e-3]]),
    )


def desk_config(n: int = 200) -> SimConfig:
    """Replication-scale setup: 60-day window, behaviour change at day 15."""
    return SimConfig(n=n, schedule=PhaseSchedule.split(15.0, 60.0),
                     network=0.05, initial_infected=1,
                     covariates=[("bernoulli", 0.5), ("normal",)])


def burst_config(n: int = 200) -> SimConfig:
    """Short-window setup observing only the growth phase of the outbreak."""
    return SimConfig(n=n, schedule=PhaseSchedule.split(10.0, 20.0),
                     network=0.05, initial_infected=1,
                     covariates=[("bernoulli", 0.5), ("normal",)])


@pytest.fixture(scope="session")
def truth():
    return ground_truth()


@pytest.fixture(scope="session")
def small_dataset(truth):
    """One mid-size simulated dataset shared by oracle tests."""
    from epinet import simulate

    config = SimConfig(n=50, schedule=PhaseSchedule.split(15.0, 60.0),
                       network=0.08, initial_infected=1,
                       covariates=[("bernoulli", 0.5), ("normal",)])
    return simulate(truth, config, np.random.default_rng(12))
