import numpy as np
import pytest

from ftensemble.config import ExperimentConfig
from ftensemble.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def blob_data():
    """Small, well-separated source/target blob datasets shared by tests."""
    spec = SynthSpec(
        dim=12,
        source_classes=6,
        target_classes=5,
        source_per_class=40,
        target_per_class=22,
        noise=0.25,
        class_sep=2.0,
        seed=11,
    )
    return generate(spec)


def tiny_config(**overrides) -> ExperimentConfig:
    """Fast desk defaults for unit tests; override per test."""
    base = dict(
        bsr=True,
        pretrain_epochs=8,
        finetune_epochs=15,
        episodes=4,
        branches=2,
        feature_dim=8,
        hidden_widths=(16,),
        batch_size=16,
    )
    base.update(overrides)
    return ExperimentConfig(**base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
