"""
BUPM — Network assembly and inference API

Responsibilities:
- Assemble backbone + mask detector + verifier into one network
- Freeze / unfreeze components for the training phases
- verify(): query image + panorama -> score, label, masks

This file DOES NOT:
- Decode images (see data_io)
- Train (see trainer)
- Serialize weights (see model_io)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from src.backbone import Backbone, extract_features
from src.bupm_matcher import MaskDetector, MatchResult, match
from src.config import ModelConfig
from src.tensor_core import from_images, to_numpy
from src.verify_head import Verifier, build_feature, decide

COMPONENTS = ("backbone", "mask_detector", "verifier")
DEFAULT_THRESHOLD = 0.5


class NetworkOutput(NamedTuple):
    score: torch.Tensor
    m_r: torch.Tensor
    m_q: torch.Tensor
    similarity: torch.Tensor


class BUPMNetwork(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config

        generator = torch.Generator().manual_seed(config.init_seed)
        self.backbone = Backbone(config.backbone, generator)
        self.mask_detector = MaskDetector(config.mask_detector, generator)
        self.verifier = Verifier(config.verifier, generator)

    @property
    def downsample_factor(self) -> int:
        return self.config.backbone.downsample_factor

    def features(self, images: torch.Tensor, reference: bool) -> torch.Tensor:
        return extract_features(images, self.backbone, pano_wrap=reference and self.config.reference_wrap)

    def match(
        self,
        query: torch.Tensor,
        reference: torch.Tensor,
        query_index: Optional[torch.Tensor] = None,
        reference_index: Optional[torch.Tensor] = None,
    ) -> MatchResult:
        """
        Batched inputs may hold each distinct image once; pair k then uses
        query[query_index[k]] and reference[reference_index[k]].
        """
        f_q = self.features(query, reference=False)
        f_r = self.features(reference, reference=True)
        return self.match_features(f_q, f_r, query_index, reference_index)

    def match_features(
        self,
        f_q: torch.Tensor,
        f_r: torch.Tensor,
        query_index: Optional[torch.Tensor] = None,
        reference_index: Optional[torch.Tensor] = None,
    ) -> MatchResult:
        if query_index is not None:
            f_q = f_q[query_index]
        if reference_index is not None:
            f_r = f_r[reference_index]
        return match(f_r, f_q, self.mask_detector, reference_wrap=self.config.reference_wrap)

    def forward(
        self,
        query: torch.Tensor,
        reference: torch.Tensor,
        query_index: Optional[torch.Tensor] = None,
        reference_index: Optional[torch.Tensor] = None,
    ) -> NetworkOutput:
        m_r, m_q, similarity = self.match(query, reference, query_index, reference_index)
        score = decide(build_feature(m_r, m_q), self.verifier)
        return NetworkOutput(score=score, m_r=m_r, m_q=m_q, similarity=similarity)


def build_model(config: ModelConfig) -> BUPMNetwork:
    return BUPMNetwork(config)


# Freezing


def set_trainable(model: BUPMNetwork, components: Iterable[str]) -> None:
    components = set(components)
    unknown = components - set(COMPONENTS)
    if unknown:
        raise ValueError(f"Unknown components: {sorted(unknown)}")
    for name in COMPONENTS:
        for p in getattr(model, name).parameters():
            p.requires_grad_(name in components)


def trainable_parameters(model: BUPMNetwork) -> List[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_parameters(model: BUPMNetwork) -> Dict[str, int]:
    counts = {name: sum(p.numel() for p in getattr(model, name).parameters()) for name in COMPONENTS}
    counts["total"] = sum(counts.values())
    return counts


# Inference API


@dataclass
class VerificationResult:
    score: float
    label: int
    m_r: np.ndarray
    m_q: np.ndarray


def check_divisible(image: np.ndarray, d: int, name: str) -> None:
    h, w = image.shape[:2]
    if h % d or w % d:
        raise ValueError(f"{name} extents {h}x{w} must be multiples of {d}")


def verify(
    query_image: np.ndarray,
    reference_image: np.ndarray,
    model: BUPMNetwork,
    threshold: float = DEFAULT_THRESHOLD,
) -> VerificationResult:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")

    d = model.downsample_factor
    check_divisible(query_image, d, "query")
    check_divisible(reference_image, d, "reference")

    model.eval()
    with torch.no_grad():
        out = model(from_images([query_image]), from_images([reference_image]))

    score = float(out.score[0])
    return VerificationResult(
        score=score,
        label=int(score >= threshold),
        m_r=to_numpy(out.m_r[0]),
        m_q=to_numpy(out.m_q[0]),
    )
