"""Shared fixtures: the two bundled advertising problems, solved once.

Both solves run at the bundled-fixture budgets (41-point grid, 13
controls, Gauss-Hermite order 7, tolerance 1e-4) and are session-scoped
because a full solve takes about a minute.
"""

import warnings

import numpy as np
import pytest

from delay_hjb import (
    AdvertisingConfig,
    build_lag_mdp,
    build_problem_spec,
    value_iteration,
)
from delay_hjb.hilbert import SegmentGrid

SEED = 2024

# the declared drift constant is spot-probed and may warn by design
warnings.filterwarnings("ignore", message=".*declared Lipschitz constant.*")
warnings.filterwarnings("ignore", message=".*one-sided difference.*")
try:  # threading-layer version notices from the jit backend are harmless
    from numba.core.errors import NumbaWarning

    warnings.filterwarnings("ignore", category=NumbaWarning)
except ImportError:  # pragma: no cover
    pass


def _solve(alpha: float):
    cfg = AdvertisingConfig(alpha=alpha)
    spec = build_problem_spec(cfg)
    mdp = build_lag_mdp(spec, 3, grid_points=41, control_points=13,
                        gh_order=7, seed=SEED)
    field = value_iteration(mdp, tol=1e-4)
    return cfg, spec, mdp, field


@pytest.fixture(scope="session")
def no_delay():
    """(config, spec, mdp, field) for the linear no-delay problem."""
    return _solve(alpha=0.0)


@pytest.fixture(scope="session")
def delayed():
    """(config, spec, mdp, field) for the distributed-delay problem."""
    return _solve(alpha=0.5)


@pytest.fixture(scope="session")
def grid21():
    return SegmentGrid.uniform(1.0, 21)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(SEED)
