import json

import pytest

from src.config import (
    DEFAULT_CONFIG_PATH,
    THREADS_ENV,
    BUPMConfig,
    ModelConfig,
    PhaseConfig,
    QUERY_SIZES,
    TrainConfig,
    apply_overrides,
    config_digest,
    default_threads,
    load_config,
    read_config_overrides,
    save_config,
)


def test_desk_bundle_loads():
    config = load_config(DEFAULT_CONFIG_PATH)
    assert config.model.backbone.downsample_factor == 8
    assert config.train.phase2a.batch_size % 2 == 0
    for size in config.train.query_sizes:
        assert size % config.model.backbone.downsample_factor == 0
    assert tuple(config.train.query_sizes) == QUERY_SIZES
    assert config.train.val_query_size == 224


def test_save_and_load_round_trip(tmp_path):
    config = apply_overrides(BUPMConfig(), {"seed": 3, "train": {"phase1": {"epochs": 1}}})
    save_config(config, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == config


def test_overrides_merge_deeply():
    config = apply_overrides(BUPMConfig(), {"train": {"phase2a": {"lr": 0.5}}})
    assert config.train.phase2a.lr == 0.5
    assert config.train.phase2a.optimizer == "adam"
    assert config.train.phase1 == TrainConfig().phase1


def test_unknown_keys_are_rejected():
    with pytest.raises(ValueError):
        apply_overrides(BUPMConfig(), {"model": {"depth": 3}})


def test_phase2_batches_must_balance():
    with pytest.raises(ValueError):
        TrainConfig(phase2a=PhaseConfig(optimizer="adam", lr=1e-3, batch_size=7, epochs=1))


def test_reference_size_must_be_divisible():
    with pytest.raises(ValueError):
        ModelConfig(reference_size=(100, 512))


def test_digest_tracks_the_config():
    a = config_digest(ModelConfig())
    assert a == config_digest(ModelConfig())
    assert a != config_digest(ModelConfig(init_seed=1))
    assert len(a) == 32


def test_config_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_config_overrides(tmp_path / "missing.json")
    (tmp_path / "list.json").write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError):
        read_config_overrides(tmp_path / "list.json")


def test_default_threads(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert default_threads() == 1
    monkeypatch.setenv(THREADS_ENV, "4")
    assert default_threads() == 4
    monkeypatch.setenv(THREADS_ENV, "zero")
    with pytest.raises(ValueError):
        default_threads()
