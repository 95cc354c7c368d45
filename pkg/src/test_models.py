import numpy as np
import pytest
import torch

from src.config import ModelConfig
from src.conftest import tiny_model_config
from src.models import (
    BUPMNetwork,
    build_model,
    count_parameters,
    set_trainable,
    trainable_parameters,
    verify,
)
from src.tensor_core import DTYPE


def _images(rng, q=(16, 16), r=(32, 128)):
    return rng.random((*q, 3)), rng.random((*r, 3))


def test_desk_model_stays_under_100k_parameters():
    counts = count_parameters(build_model(ModelConfig()))
    assert counts["total"] == counts["backbone"] + counts["mask_detector"] + counts["verifier"]
    assert counts["total"] <= 100_000
    assert counts["verifier"] == 121


def test_forward_shapes(tiny_model):
    q = torch.rand(2, 16, 24, 3, dtype=DTYPE)
    r = torch.rand(2, 32, 128, 3, dtype=DTYPE)
    out = tiny_model(q, r)
    assert out.score.shape == (2,)
    assert out.m_r.shape == (2, 8, 32, 1)
    assert out.m_q.shape == (2, 4, 6, 1)


def test_same_init_seed_same_weights():
    a, b = build_model(tiny_model_config()), build_model(tiny_model_config())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = build_model(tiny_model_config(init_seed=1))
    assert not torch.equal(a.backbone.layers[0].kernel, c.backbone.layers[0].kernel)


def test_set_trainable_freezes_components(tiny_model):
    set_trainable(tiny_model, ["verifier"])
    trainable = {id(p) for p in trainable_parameters(tiny_model)}
    assert trainable == {id(p) for p in tiny_model.verifier.parameters()}
    with pytest.raises(ValueError):
        set_trainable(tiny_model, ["head"])


def test_verify_is_deterministic(tiny_model, rng):
    query, reference = _images(rng)
    a = verify(query, reference, tiny_model)
    b = verify(query, reference, tiny_model)
    assert a.score == b.score
    assert 0.0 < a.score < 1.0
    assert a.label == int(a.score >= 0.5)
    assert a.m_r.shape == (8, 32, 1)
    assert a.m_q.shape == (4, 4, 1)


def test_verify_threshold_sets_label(tiny_model, rng):
    query, reference = _images(rng)
    for t in (0.1, 0.5, 0.9):
        result = verify(query, reference, tiny_model, threshold=t)
        assert result.label == int(result.score >= t)


def test_verify_rejects_bad_inputs(tiny_model, rng):
    query, reference = _images(rng)
    with pytest.raises(ValueError):
        verify(query, reference, tiny_model, threshold=1.0)
    with pytest.raises(ValueError):
        verify(rng.random((15, 16, 3)), reference, tiny_model)


def test_network_is_a_module(tiny_model):
    assert isinstance(tiny_model, BUPMNetwork)
    assert tiny_model.downsample_factor == 4
    assert all(p.dtype == torch.float64 for p in tiny_model.parameters())
    assert np.isfinite(sum(p.sum().item() for p in tiny_model.parameters()))
