from __future__ import annotations

import numpy as np
import pytest

from clbayes.gp_model import GpParams, PairwiseLikelihood, ReplicateData, SiteLayout, simulate_gp

THETA0 = GpParams(mu=0.0, tau=1.0, omega=3.0)


@pytest.fixture(scope="session")
def reference_layout() -> SiteLayout:
    rng = np.random.default_rng(2024)
    return SiteLayout(rng.uniform(0.0, 20.0, 20))


@pytest.fixture(scope="session")
def reference_data(reference_layout) -> ReplicateData:
    return simulate_gp(THETA0, reference_layout, 50, 4242)


@pytest.fixture(scope="session")
def reference_pairwise(reference_data) -> PairwiseLikelihood:
    return PairwiseLikelihood(reference_data)


def small_instance(seed: int, k: int = 4, n: int = 6):
    """A small random dataset plus parameters drawn near the truth."""
    rng = np.random.default_rng(seed)
    layout = SiteLayout(np.sort(rng.uniform(0.0, 10.0, k)) + 0.05 * np.arange(k))
    params = GpParams(
        mu=float(rng.normal(0, 1)),
        tau=float(rng.uniform(0.5, 2.0)),
        omega=float(rng.uniform(1.0, 5.0)),
    )
    data = simulate_gp(params, layout, n, seed + 1)
    return params, layout, data
