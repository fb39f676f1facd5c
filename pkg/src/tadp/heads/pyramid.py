"""Shared FPN neck over the V pyramid."""
from __future__ import annotations

import math
from collections.abc import Mapping

import torch
import torch.nn.functional as F
from torch import nn


class LayoutMismatchError(ValueError):
    pass


def _groups(channels: int, preferred: int = 32) -> int:
    return math.gcd(channels, preferred)


def pyramid_of(v) -> dict[int, torch.Tensor]:
    """Accept a FeatureBundle or a plain divisor -> tensor mapping."""
    maps = getattr(v, "concatenated", v)
    if not isinstance(maps, Mapping):
        raise TypeError(f"expected a FeatureBundle or mapping, got {type(v).__name__}")
    return {int(d): t for d, t in maps.items()}


def check_layout(pyramid: Mapping[int, torch.Tensor], layout: Mapping[int, int]) -> None:
    missing = sorted(set(layout) - set(pyramid))
    extra = sorted(set(pyramid) - set(layout))
    if missing or extra:
        raise LayoutMismatchError(f"V scales differ from the head layout: missing {missing}, unexpected {extra}")
    for d, ch in layout.items():
        got = pyramid[d].shape[1]
        if got != ch:
            raise LayoutMismatchError(f"scale 1/{d}: head expects {ch} channels, V has {got}")


class FPNNeck(nn.Module):
    """Lateral 1x1 convs, top-down addition and 3x3 smoothing, one output per divisor."""

    def __init__(self, layout: Mapping[int, int], channels: int = 256):
        super().__init__()
        if not layout:
            raise ValueError("empty input layout")
        self.layout = {int(d): int(c) for d, c in sorted(layout.items())}
        self.divisors = sorted(self.layout)
        self.channels = channels
        self.lateral = nn.ModuleDict({str(d): nn.Conv2d(c, channels, 1) for d, c in self.layout.items()})
        self.smooth = nn.ModuleDict({str(d): nn.Conv2d(channels, channels, 3, padding=1) for d in self.divisors})

    def forward(self, v) -> dict[int, torch.Tensor]:
        pyramid = pyramid_of(v)
        check_layout(pyramid, self.layout)
        lat = {d: self.lateral[str(d)](pyramid[d]) for d in self.divisors}
        out = {}
        top = None
        for d in reversed(self.divisors):
            x = lat[d]
            if top is not None:
                x = x + F.interpolate(top, size=x.shape[-2:], mode="nearest")
            top = x
            out[d] = self.smooth[str(d)](x)
        return out


class _ScaleHead(nn.Module):
    """conv-GN-ReLU blocks with 2x upsampling until the finest divisor (semantic FPN)."""

    def __init__(self, cin: int, cout: int, n_up: int):
        super().__init__()
        layers = []
        for i in range(max(n_up, 1)):
            layers += [
                nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1, bias=False),
                nn.GroupNorm(_groups(cout), cout),
                nn.ReLU(inplace=True),
            ]
            if n_up:
                layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class PyramidDecoder(nn.Module):
    """FPN neck plus semantic-FPN fusion into one map at the finest divisor."""

    def __init__(self, layout: Mapping[int, int], fpn_channels: int = 256, out_channels: int = 128):
        super().__init__()
        self.neck = FPNNeck(layout, fpn_channels)
        self.finest = self.neck.divisors[0]
        self.out_channels = out_channels
        self.scale_heads = nn.ModuleDict(
            {str(d): _ScaleHead(fpn_channels, out_channels, int(math.log2(d // self.finest))) for d in self.neck.divisors}
        )

    @property
    def layout(self) -> dict[int, int]:
        return dict(self.neck.layout)

    def forward(self, v) -> torch.Tensor:
        levels = self.neck(v)
        base = levels[self.finest]
        fused = None
        for d, x in levels.items():
            y = self.scale_heads[str(d)](x)
            if y.shape[-2:] != base.shape[-2:]:
                y = F.interpolate(y, size=base.shape[-2:], mode="bilinear", align_corners=False)
            fused = y if fused is None else fused + y
        return fused

    def output_size(self, fused: torch.Tensor, out_size=None) -> tuple[int, int]:
        if out_size is not None:
            return tuple(out_size)
        h, w = fused.shape[-2:]
        return h * self.finest, w * self.finest
