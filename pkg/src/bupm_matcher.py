"""
BUPM — Bottom-up pattern matching

1. pairwise cosine similarity between every reference and query patch
2. global max pooling towards each side
3. inception-style mask detection (kernels 1/3/5, 4 filters each, 1x1 fusion, sigmoid)
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from src.backbone import ConvLayer
from src.config import MaskDetectorConfig
from src.tensor_core import activation, conv2d, l2_normalize, reduce


class BestScores(NamedTuple):
    b_r: torch.Tensor  # [N x] Hr' x Wr' x 1
    b_q: torch.Tensor  # [N x] Hq' x Wq' x 1


class MatchResult(NamedTuple):
    m_r: torch.Tensor
    m_q: torch.Tensor
    similarity: torch.Tensor


def pairwise_cosine(f_r: torch.Tensor, f_q: torch.Tensor) -> torch.Tensor:
    """S[x, y, i, j] = <F_R[x,y], F_Q[i,j]> / (|F_R[x,y]| |F_Q[i,j]|), zero fibers give 0."""
    if f_r.shape[-1] != f_q.shape[-1]:
        raise ValueError(
            f"feature depth mismatch: reference {f_r.shape[-1]} vs query {f_q.shape[-1]}"
        )
    if f_r.dim() != f_q.dim():
        raise ValueError("reference and query features must both be batched or both unbatched")
    n_r = l2_normalize(f_r)
    n_q = l2_normalize(f_q)
    return torch.einsum("...xyc,...ijc->...xyij", n_r, n_q)


def global_max_pool(similarity: torch.Tensor) -> BestScores:
    b_r = reduce(similarity, axes=(-2, -1), kind="max").unsqueeze(-1)
    b_q = reduce(similarity, axes=(-4, -3), kind="max").unsqueeze(-1)
    return BestScores(b_r=b_r, b_q=b_q)


class MaskDetector(nn.Module):
    def __init__(self, config: MaskDetectorConfig, generator: torch.Generator):
        super().__init__()
        self.config = config
        self.branches = nn.ModuleList(
            ConvLayer(k, 1, config.filters_per_branch, generator) for k in config.branch_kernels
        )
        fused = config.filters_per_branch * len(config.branch_kernels)
        self.fusion = ConvLayer(1, fused, 1, generator)

    def forward(self, best: torch.Tensor, pano_wrap: bool = False) -> torch.Tensor:
        return detect_mask(best, self, pano_wrap=pano_wrap)


def set_threshold_response(detector: MaskDetector, gain: float, threshold: float) -> None:
    """
    Overwrite the detector so that it computes sigmoid(gain * (best - threshold))
    cell by cell. Only the 1x1 branch feeds the fusion; the 3x3 and 5x5 branches
    keep their weights and start with zero fusion weight.
    """
    if gain <= 0:
        raise ValueError(f"gain must be positive, got {gain}")
    ones = detector.config.branch_kernels.index(1)
    f = detector.config.filters_per_branch
    with torch.no_grad():
        detector.branches[ones].kernel.fill_(1.0)
        detector.branches[ones].bias.zero_()
        detector.fusion.kernel.zero_()
        detector.fusion.kernel[..., ones * f:(ones + 1) * f, :] = gain / f
        detector.fusion.bias.fill_(-gain * threshold)


def detect_mask(best: torch.Tensor, detector: MaskDetector, pano_wrap: bool = False) -> torch.Tensor:
    """best: [N x] H' x W' x 1 -> mask of the same extents, values in (0, 1)."""
    if best.shape[-1] != 1 or best.shape[-3] < 1 or best.shape[-2] < 1:
        raise ValueError(f"best scores must be [N x] H' x W' x 1, got {tuple(best.shape)}")
    padding = "same-circular-horizontal" if pano_wrap else "same-zero"
    branches = [branch(best, padding=padding) for branch in detector.branches]
    stacked = torch.cat(branches, dim=-1)
    fused = detector.fusion(stacked, padding=padding)
    return activation(fused, "sigmoid")


def match(
    f_r: torch.Tensor,
    f_q: torch.Tensor,
    detector: MaskDetector,
    reference_wrap: bool = True,
) -> MatchResult:
    similarity = pairwise_cosine(f_r, f_q)
    best = global_max_pool(similarity)
    m_r = detect_mask(best.b_r, detector, pano_wrap=reference_wrap)
    m_q = detect_mask(best.b_q, detector, pano_wrap=False)
    return MatchResult(m_r=m_r, m_q=m_q, similarity=similarity)


def rotate_horizontal(t: torch.Tensor, shift: int) -> torch.Tensor:
    """Roll a [N x] H x W x C map by `shift` columns (panorama heading change)."""
    return torch.roll(t, shifts=shift, dims=t.dim() - 2)
