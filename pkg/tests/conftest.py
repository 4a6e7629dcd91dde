import numpy as np
import pytest

from bagbid.market import MarketConfig
from bagbid.trajectory import CampaignConstraints


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def small_config():
    """Reduced market for fast unit tests (24 steps x 20 opportunities)."""
    from bagbid.market import sinusoid_cvr_profile

    return MarketConfig(
        steps_per_episode=24,
        opportunities_per_step=20,
        cvr_profile=sinusoid_cvr_profile(24, seed=5),
        seed=42,
    )


@pytest.fixture
def constraints():
    return CampaignConstraints(budget=8.0, ros_bound=6.0)


@pytest.fixture
def tiny_experiment(tmp_path):
    """Small but complete experiment config for pipeline tests."""
    from bagbid.discriminator import DiscConfig
    from bagbid.pipeline import CampaignSpec, ExperimentConfig, MarketSettings
    from bagbid.transformer import ModelConfig

    return ExperimentConfig(
        seed=7,
        output_dir=str(tmp_path / "run"),
        market=MarketSettings(steps_per_episode=24, opportunities_per_step=20),
        campaigns=[
            CampaignSpec(campaign_id="c0", budget=6.0, ros_bound=6.0),
            CampaignSpec(campaign_id="c1", budget=9.0, ros_bound=6.0),
        ],
        train_episodes_per_campaign=4,
        test_periods=2,
        test_seeds_per_period=2,
        model=ModelConfig(
            d_model=16, n_layers=1, n_heads=2, context_steps=24, bag_len=8,
            k_levels=2, train_steps=60, batch_size=4, seed=0,
        ),
        disc=DiscConfig(steps=80, batch_size=64, seed=0),
    )
