"""
Verification head for BUPM.

Soft patch count: V = [mean(M_R), mean(M_Q)] fed to a 16-4-1 MLP with a
sigmoid output.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from src.backbone import he_uniform
from src.config import VerifierConfig
from src.tensor_core import DTYPE, activation, dense, reduce


def build_feature(m_r: torch.Tensor, m_q: torch.Tensor) -> torch.Tensor:
    """[N x] H' x W' x 1 masks -> [N x] 2 feature."""
    v_r = reduce(m_r, axes=(-3, -2, -1), kind="mean")
    v_q = reduce(m_q, axes=(-3, -2, -1), kind="mean")
    return torch.stack([v_r, v_q], dim=-1)


class DenseLayer(nn.Module):
    def __init__(self, n_in: int, n_out: int, generator: torch.Generator):
        super().__init__()
        self.weights = nn.Parameter(he_uniform((n_in, n_out), n_in, generator))
        self.bias = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dense(x, self.weights, self.bias)


class Verifier(nn.Module):
    def __init__(self, config: VerifierConfig, generator: torch.Generator):
        super().__init__()
        self.config = config
        widths = (2,) + tuple(config.layer_units)
        self.layers = nn.ModuleList(
            DenseLayer(widths[i], widths[i + 1], generator) for i in range(len(widths) - 1)
        )

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return decide(v, self)


def decide(v: torch.Tensor, verifier: Verifier) -> torch.Tensor:
    """[N x] 2 -> [N] score in (0, 1)."""
    x = v
    last = len(verifier.layers) - 1
    for i, layer in enumerate(verifier.layers):
        x = layer(x)
        x = activation(x, "sigmoid" if i == last else "relu")
    return x.squeeze(-1)
