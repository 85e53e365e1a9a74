"""Shared fixtures: small simulated cohorts and reference schedules."""

import numpy as np
import pytest

from u5mr.core import CovariateProfile, TableFertility, TableHazard
from u5mr.simulate import SimulationConfig, simulate_cohort


@pytest.fixture(scope="session")
def small_cohort():
    """600 women, 200 with full histories; fixed seed."""
    cfg = SimulationConfig(n_women=600, n_fbh=200, rng_seed=11)
    fbh, sbh, truth = simulate_cohort(cfg)
    return fbh, sbh, truth, cfg


@pytest.fixture(scope="session")
def flat_schedules():
    """Constant fertility 0.2, hazards (0.15, 0.04, 0.01)."""
    f = TableFertility((0.2, 0.2, 0.2, 0.2, 0.2))
    q = TableHazard(1975, tuple((0.15, 0.04, 0.01) for _ in range(7)))
    return f, q


@pytest.fixture
def cov():
    return CovariateProfile()


@pytest.fixture
def rng():
    return np.random.default_rng(202)
