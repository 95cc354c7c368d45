import struct

import numpy as np
import pytest
import torch

from src.conftest import tiny_model_config
from src.model_io import (
    MAGIC,
    CheckpointError,
    apply_checkpoint,
    checkpoint_from_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    load_model,
    save_checkpoint,
)
from src.models import build_model, trainable_parameters
from src.tensor_core import DTYPE, backward, build_optimizer, optimizer_step


def _trained_adam(model, steps=2):
    opt = build_optimizer(trainable_parameters(model), "adam", lr=1e-3)
    q = torch.rand(1, 16, 16, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(0))
    r = torch.rand(1, 32, 128, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
    for _ in range(steps):
        backward(model(q, r).score.sum())
        optimizer_step(opt)
    return opt


def test_encode_is_deterministic_and_lossless(tiny_model):
    ckpt = checkpoint_from_model(tiny_model, "phase1", 3, metrics={"train_loss": 0.5, "val_loss": None})
    data = encode_checkpoint(ckpt)
    assert data[:8] == MAGIC
    assert encode_checkpoint(ckpt) == data

    back = decode_checkpoint(data)
    assert back.phase == "phase1" and back.epoch == 3
    assert back.metrics == {"train_loss": 0.5, "val_loss": None}
    assert back.model_config == tiny_model.config
    for name, arr in ckpt.weights.items():
        assert np.array_equal(back.weights[name], arr)


def test_optimizer_state_survives_a_round_trip(tiny_model):
    opt = _trained_adam(tiny_model)
    ckpt = checkpoint_from_model(tiny_model, "phase2b", 1, optimizer=opt)
    back = decode_checkpoint(encode_checkpoint(ckpt))
    assert back.optimizer.kind == "adam"
    assert set(back.optimizer.steps.values()) == {2}

    fresh = build_model(tiny_model.config)
    fresh_opt = build_optimizer(trainable_parameters(fresh), "adam", lr=1e-3)
    apply_checkpoint(back, fresh, fresh_opt)
    for a, b in zip(tiny_model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)

    # one more identical step keeps both in lockstep
    for model, o in ((tiny_model, opt), (fresh, fresh_opt)):
        q = torch.ones(1, 16, 16, 3, dtype=DTYPE) * 0.5
        r = torch.ones(1, 32, 128, 3, dtype=DTYPE) * 0.25
        backward(model(q, r).score.sum())
        optimizer_step(o)
    for a, b in zip(tiny_model.parameters(), fresh.parameters()):
        assert torch.equal(a, b)


def test_file_round_trip_and_load_model(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(checkpoint_from_model(tiny_model, "phase1", 0), path)
    model, ckpt = load_model(path)
    assert ckpt.epoch == 0
    for a, b in zip(tiny_model.parameters(), model.parameters()):
        assert torch.equal(a, b)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_corrupt_checkpoints_are_rejected(tiny_model):
    data = encode_checkpoint(checkpoint_from_model(tiny_model, "phase1", 0))

    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(CheckpointError, match="digest"):
        decode_checkpoint(data[:12] + bytes(32) + data[44:])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(data[:-4])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(data + b"\x00")


def test_checkpoint_for_another_config_is_refused(tiny_model):
    ckpt = checkpoint_from_model(tiny_model, "phase1", 0)
    other = build_model(tiny_model_config(init_seed=5))
    with pytest.raises(CheckpointError):
        apply_checkpoint(ckpt, other)
