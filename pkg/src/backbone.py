"""
Feature extraction backbone for BUPM.

A convolution-only trunk (no dense layers, no global pooling): every stage is
conv 3x3 + relu + stride-2 conv 3x3, so an H x W x 3 image becomes an
(H/d) x (W/d) x C patch-feature map with d = 2^num_stages.
"""

from __future__ import annotations

import math
from typing import List

import torch
import torch.nn as nn

from src.config import BackboneConfig
from src.tensor_core import DTYPE, activation, conv2d


def he_uniform(shape, fan_in: int, generator: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


class ConvLayer(nn.Module):
    """One channels-last convolution with its own kernel and bias."""

    def __init__(self, k: int, cin: int, cout: int, generator: torch.Generator):
        super().__init__()
        self.kernel = nn.Parameter(he_uniform((k, k, cin, cout), k * k * cin, generator))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=DTYPE))

    def forward(self, x: torch.Tensor, padding: str = "same-zero", stride: int = 1) -> torch.Tensor:
        return conv2d(x, self.kernel, self.bias, padding=padding, stride=stride)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, generator: torch.Generator):
        super().__init__()
        self.config = config

        k = config.kernel_size
        layers: List[nn.Module] = []
        cin = 3
        for cout in config.channels_per_stage:
            layers.append(ConvLayer(k, cin, cout, generator))
            layers.append(ConvLayer(k, cout, cout, generator))
            cin = cout
        self.layers = nn.ModuleList(layers)

    @property
    def downsample_factor(self) -> int:
        return self.config.downsample_factor

    def forward(self, image: torch.Tensor, pano_wrap: bool = False) -> torch.Tensor:
        return extract_features(image, self, pano_wrap=pano_wrap)


def extract_features(image: torch.Tensor, backbone: Backbone, pano_wrap: bool = False) -> torch.Tensor:
    """
    image  : [N x] H x W x 3, values in [0, 1]
    output : [N x] H/d x W/d x C
    """
    d = backbone.downsample_factor
    h, w = image.shape[-3], image.shape[-2]
    if image.shape[-1] != 3:
        raise ValueError(f"expected a 3-channel image, got {image.shape[-1]} channels")
    if h % d or w % d:
        raise ValueError(f"image extents {h}x{w} must be multiples of {d}; resize first")

    padding = "same-circular-horizontal" if pano_wrap else "same-zero"
    x = image
    last = len(backbone.layers) - 1
    for i in range(0, len(backbone.layers), 2):
        x = activation(backbone.layers[i](x, padding=padding, stride=1), "relu")
        x = backbone.layers[i + 1](x, padding=padding, stride=2)
        if i + 1 != last:
            x = activation(x, "relu")
    return x
