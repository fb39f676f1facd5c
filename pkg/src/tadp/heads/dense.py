"""Segmentation and depth heads."""
from __future__ import annotations

from collections.abc import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .pyramid import PyramidDecoder


class SegHead(nn.Module):
    """Semantic FPN returning (B, classes, H, W) logits at image resolution."""

    task = "Segmentation"

    def __init__(self, layout: Mapping[int, int], num_classes: int, fpn_channels: int = 256,
                 decoder_channels: int = 128, dropout: float = 0.1):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        self.decoder = PyramidDecoder(layout, fpn_channels, decoder_channels)
        self.dropout = nn.Dropout2d(dropout)
        self.classifier = nn.Conv2d(decoder_channels, num_classes, 1)
        # the usual decode-head init: an untrained head scores classes near-uniformly
        nn.init.normal_(self.classifier.weight, 0.0, 0.01)
        nn.init.zeros_(self.classifier.bias)

    @property
    def layout(self) -> dict[int, int]:
        return self.decoder.layout

    def forward(self, v, out_size=None) -> torch.Tensor:
        fused = self.decoder(v)
        logits = self.classifier(self.dropout(fused))
        return F.interpolate(logits, size=self.decoder.output_size(fused, out_size), mode="bilinear", align_corners=False)


class DepthHead(nn.Module):
    """Semantic FPN with a sigmoid output rescaled to [min_depth, max_depth]; returns (B, 1, H, W)."""

    task = "Depth"

    def __init__(self, layout: Mapping[int, int], fpn_channels: int = 256, decoder_channels: int = 128,
                 min_depth: float = 1e-3, max_depth: float = 10.0):
        super().__init__()
        if not 0 < min_depth < max_depth:
            raise ValueError("need 0 < min_depth < max_depth")
        self.min_depth, self.max_depth = min_depth, max_depth
        self.decoder = PyramidDecoder(layout, fpn_channels, decoder_channels)
        self.out = nn.Sequential(
            nn.Conv2d(decoder_channels, decoder_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(decoder_channels, 1, 1),
        )

    @property
    def layout(self) -> dict[int, int]:
        return self.decoder.layout

    def forward(self, v, out_size=None) -> torch.Tensor:
        fused = self.decoder(v)
        x = F.interpolate(self.out(fused), size=self.decoder.output_size(fused, out_size), mode="bilinear", align_corners=False)
        return self.min_depth + (self.max_depth - self.min_depth) * torch.sigmoid(x)
