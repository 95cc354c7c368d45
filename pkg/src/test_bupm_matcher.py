import numpy as np
import pytest
import torch

from src.bupm_matcher import (
    MaskDetector,
    detect_mask,
    global_max_pool,
    match,
    pairwise_cosine,
    rotate_horizontal,
    set_threshold_response,
)
from src.config import MaskDetectorConfig
from src.tensor_core import DTYPE


def _randn(*shape, g):
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def _detector(seed=0):
    return MaskDetector(MaskDetectorConfig(), torch.Generator().manual_seed(seed))


# Similarity


def _brute_cosine(f_r, f_q):
    hr, wr, _ = f_r.shape
    hq, wq, _ = f_q.shape
    out = np.zeros((hr, wr, hq, wq))
    for x in range(hr):
        for y in range(wr):
            for i in range(hq):
                for j in range(wq):
                    a, b = f_r[x, y], f_q[i, j]
                    na, nb = np.linalg.norm(a), np.linalg.norm(b)
                    out[x, y, i, j] = 0.0 if na == 0 or nb == 0 else float(a @ b) / (na * nb)
    return out


def test_pairwise_cosine_matches_nested_loops():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        hr, wr, hq, wq = (int(v) for v in torch.randint(1, 9, (4,), generator=g))
        c = int(torch.randint(1, 17, (1,), generator=g))
        f_r, f_q = _randn(hr, wr, c, g=g), _randn(hq, wq, c, g=g)
        fast = pairwise_cosine(f_r, f_q).numpy()
        slow = _brute_cosine(f_r.numpy(), f_q.numpy())
        assert np.allclose(fast, slow, rtol=1e-12, atol=1e-12)


def test_pairwise_cosine_identical_features_and_zero_fiber():
    f = torch.tensor([[[1.0, 2.0], [0.0, 0.0]]], dtype=DTYPE)
    s = pairwise_cosine(f, f)
    assert s[0, 0, 0, 0].item() == pytest.approx(1.0, abs=1e-15)
    assert s[0, 1, 0, 1].item() == 0.0


def test_pairwise_cosine_ignores_fiber_scale():
    g = torch.Generator().manual_seed(5)
    f_r, f_q = _randn(3, 6, 8, g=g), _randn(2, 4, 8, g=g)
    base = pairwise_cosine(f_r, f_q)
    for factor in (1e-3, 0.5, 7.0, 1e4):
        scaled = f_r.clone()
        scaled[1, 2] *= factor
        assert torch.allclose(pairwise_cosine(scaled, f_q), base, rtol=0.0, atol=1e-9)


def test_pairwise_cosine_rejects_depth_mismatch():
    g = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        pairwise_cosine(_randn(2, 2, 3, g=g), _randn(2, 2, 4, g=g))


# Pooling


def test_global_max_pool_matches_exhaustive_scan():
    g = torch.Generator().manual_seed(1)
    for _ in range(100):
        shape = tuple(int(v) for v in torch.randint(1, 6, (4,), generator=g))
        s = _randn(*shape, g=g)
        b_r, b_q = global_max_pool(s)
        arr = s.numpy()
        expected_r = np.array([[arr[x, y].max() for y in range(shape[1])] for x in range(shape[0])])
        expected_q = np.array([[arr[:, :, i, j].max() for j in range(shape[3])] for i in range(shape[2])])
        assert np.array_equal(b_r[..., 0].numpy(), expected_r)
        assert np.array_equal(b_q[..., 0].numpy(), expected_q)
        assert b_r.max().item() == b_q.max().item()


# Mask detector


def test_detect_mask_shape_and_range():
    g = torch.Generator().manual_seed(2)
    best = _randn(2, 4, 16, 1, g=g)
    mask = detect_mask(best, _detector(), pano_wrap=True)
    assert mask.shape == best.shape
    assert torch.all((mask > 0) & (mask < 1))


def test_detect_mask_rejects_multichannel_input():
    g = torch.Generator().manual_seed(2)
    with pytest.raises(ValueError):
        detect_mask(_randn(4, 4, 2, g=g), _detector())


def test_mask_detector_parameter_count():
    # three branches of four filters, then a 12 -> 1 fusion
    assert sum(p.numel() for p in _detector().parameters()) == 8 + 40 + 104 + 13


def test_panorama_mask_follows_heading_rotation():
    g = torch.Generator().manual_seed(3)
    f_r, f_q = _randn(4, 16, 8, g=g), _randn(3, 3, 8, g=g)
    det = _detector()
    base = match(f_r, f_q, det, reference_wrap=True).m_r
    rotated = match(rotate_horizontal(f_r, 5), f_q, det, reference_wrap=True).m_r
    assert torch.allclose(rotated, rotate_horizontal(base, 5), atol=1e-12)


def test_match_outputs():
    g = torch.Generator().manual_seed(4)
    f_r, f_q = _randn(4, 16, 8, g=g), _randn(3, 5, 8, g=g)
    result = match(f_r, f_q, _detector())
    assert result.m_r.shape == (4, 16, 1)
    assert result.m_q.shape == (3, 5, 1)
    assert result.similarity.shape == (4, 16, 3, 5)


def test_threshold_response_is_a_per_cell_sigmoid():
    g = torch.Generator().manual_seed(6)
    best = torch.rand(2, 4, 16, 1, generator=g, dtype=DTYPE) * 2.0 - 1.0
    det = _detector()
    set_threshold_response(det, gain=12.0, threshold=0.3)
    for wrap in (False, True):
        mask = detect_mask(best, det, pano_wrap=wrap)
        assert torch.allclose(mask, torch.sigmoid(12.0 * (best - 0.3)), atol=1e-12)


def test_threshold_response_needs_a_positive_gain():
    with pytest.raises(ValueError):
        set_threshold_response(_detector(), gain=0.0, threshold=0.5)
