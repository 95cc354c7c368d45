import numpy as np
import pytest

from src.config import BackboneConfig, ModelConfig, PhaseConfig, SynthConfig, TrainConfig
from src.models import build_model
from src.synth_gen import write_synthetic_dataset
from src.tensor_core import configure_determinism


configure_determinism(1)


def tiny_model_config(**overrides) -> ModelConfig:
    fields = dict(
        backbone=BackboneConfig(
            num_stages=2, channels_per_stage=(4, 4), downsample_factor=4, feature_depth=4
        ),
        reference_size=(32, 128),
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_train_config(**overrides) -> TrainConfig:
    fields = dict(
        phase1=PhaseConfig(optimizer="sgd", lr=1e-2, batch_size=4, epochs=2),
        phase2a=PhaseConfig(optimizer="adam", lr=1e-3, batch_size=4, epochs=2),
        phase2b=PhaseConfig(optimizer="adam", lr=1e-5, batch_size=4, epochs=1),
        query_sizes=(16, 24),
        val_query_size=24,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


TINY_SYNTH = SynthConfig(
    panorama_size=(32, 128),
    query_size=24,
    min_panorama=16,
    region_source="buildings",
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(tiny_config):
    return build_model(tiny_config)


@pytest.fixture
def tiny_train():
    return tiny_train_config()


@pytest.fixture
def tiny_dataset(tmp_path):
    """Manifest path of a 6-panorama, 24-sample synthetic dataset."""
    return write_synthetic_dataset(tmp_path / "data", 6, 24, seed=0, config=TINY_SYNTH, d=4)
