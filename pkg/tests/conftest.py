import numpy as np
import pytest

from lossleader.demand import DemandParams
from lossleader.dynamic import build_trust_transition
from lossleader.synth import SynthConfig, generate_panel


@pytest.fixture(scope="session")
def small_panel():
    """60-market, 40-week noiseless world shared across read-only tests."""
    cfg = SynthConfig(seed=7, n_markets=60, n_weeks=40, period_break=20, xi_sd=0.0)
    panel, truth = generate_panel(cfg)
    return panel, truth


GAME_WORLD_SPEC = dict(
    seed=5, n_markets=20, n_weeks=60, period_break=30, xi_sd=0.0,
    ladder_z=None, tier_steps=(1.30, 1.22), tier0_markup=-0.05,
    cost_median=11_000.0, size_median=800.0, alpha_dispersion=0.0,
    group_share_range=(0.35, 0.55),
)


@pytest.fixture(scope="session")
def game_world():
    """Frozen 20-market world with a uniform trust model for game tests."""
    panel, truth = generate_panel(SynthConfig(**GAME_WORLD_SPEC))
    trust = build_trust_transition(np.zeros((10, 10)), laplace_lambda=0.5,
                                   grid=np.linspace(0.0, 45.0, 10))
    return panel, trust


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def paper_demand():
    return DemandParams()
