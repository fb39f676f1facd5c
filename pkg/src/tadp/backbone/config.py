"""Backbone configuration and the value types that flow out of the backbone."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import torch

SD_SCALE_FACTOR = 0.18215


class BackboneError(Exception):
    """Base class for backbone contract violations."""


class DimensionMismatchError(BackboneError):
    pass


class TokenOverflowError(BackboneError):
    pass


class SiteCaptureError(BackboneError):
    pass


class StubBackboneError(BackboneError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class FeatureScale:
    scale_id: str
    channels: int
    divisor: int


@dataclass(frozen=True)
class AttentionSite:
    layer_id: str
    heads: int
    divisor: int


@dataclass(frozen=True)
class BackboneConfig:
    """Static description of what a backbone exposes.

    Divisors are relative to the input image, so a site with divisor 16 on a
    512px image yields 32x32 maps.
    """

    feature_scales: tuple[FeatureScale, ...]
    attention_sites: tuple[AttentionSite, ...]
    latent_channels: int = 4
    latent_downsample: int = 8
    max_text_tokens: int = 77
    embed_dim: int = 768
    scale_factor: float = SD_SCALE_FACTOR
    num_train_timesteps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "feature_scales", tuple(self.feature_scales))
        object.__setattr__(self, "attention_sites", tuple(self.attention_sites))
        self.validate()

    def validate(self) -> None:
        if not self.feature_scales:
            raise ValueError("feature_scales must be nonempty")
        if not self.attention_sites:
            raise ValueError("attention_sites must be nonempty")
        if not _is_pow2(self.latent_downsample):
            raise ValueError("latent_downsample must be a power of two")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        for item in (*self.feature_scales, *self.attention_sites):
            if not _is_pow2(item.divisor):
                raise ValueError(f"divisor {item.divisor} of {item} is not a power of two")
            if item.divisor < self.latent_downsample:
                raise ValueError(f"divisor {item.divisor} finer than the latent grid")
        for name, ids in (
            ("scale_id", [s.scale_id for s in self.feature_scales]),
            ("layer_id", [s.layer_id for s in self.attention_sites]),
        ):
            dup = [k for k, v in Counter(ids).items() if v > 1]
            if dup:
                raise ValueError(f"duplicate {name}: {dup}")

    @property
    def divisors(self) -> tuple[int, ...]:
        found = {s.divisor for s in self.feature_scales} | {a.divisor for a in self.attention_sites}
        return tuple(sorted(found))

    def v_layout(self, n_tokens: int) -> dict[int, int]:
        """Channel count of the concatenated V at each divisor.

        Attention contributes one channel per token per site (heads averaged).
        """
        layout = {d: 0 for d in self.divisors}
        for s in self.feature_scales:
            layout[s.divisor] += s.channels
        for a in self.attention_sites:
            layout[a.divisor] += n_tokens
        return layout

    def to_dict(self) -> dict:
        return {
            "feature_scales": [[s.scale_id, s.channels, s.divisor] for s in self.feature_scales],
            "attention_sites": [[a.layer_id, a.heads, a.divisor] for a in self.attention_sites],
            "latent_channels": self.latent_channels,
            "latent_downsample": self.latent_downsample,
            "max_text_tokens": self.max_text_tokens,
            "embed_dim": self.embed_dim,
            "scale_factor": self.scale_factor,
            "num_train_timesteps": self.num_train_timesteps,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackboneConfig":
        d = dict(d)
        d["feature_scales"] = tuple(FeatureScale(str(a), int(b), int(c)) for a, b, c in d["feature_scales"])
        d["attention_sites"] = tuple(AttentionSite(str(a), int(b), int(c)) for a, b, c in d["attention_sites"])
        return cls(**d)


def default_stub_config(embed_dim: int = 768, max_text_tokens: int = 77) -> BackboneConfig:
    """A three-level pyramid resembling the reference U-Net at 1/8, 1/16, 1/32."""
    return BackboneConfig(
        feature_scales=(
            FeatureScale("s8", 32, 8),
            FeatureScale("s16", 48, 16),
            FeatureScale("s32", 64, 32),
        ),
        attention_sites=(
            AttentionSite("down8", 4, 8),
            AttentionSite("down16", 4, 16),
            AttentionSite("mid32", 4, 32),
        ),
        embed_dim=embed_dim,
        max_text_tokens=max_text_tokens,
    )


@dataclass(frozen=True)
class ScaledLatent:
    """Encoder output multiplied by ``scale_factor``; ``values`` is (B, C, h, w)."""

    values: torch.Tensor
    scale_factor: float = SD_SCALE_FACTOR
    timestep: int = 0

    def __post_init__(self):
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")
        if self.timestep < 0:
            raise ValueError("timestep must be non-negative")


@dataclass(frozen=True)
class FeatureBundle:
    """Result of one extraction pass.

    attention: layer_id -> (B, heads, tokens, h, w) post-softmax probabilities
    features: scale_id -> (B, C, h, w)
    concatenated: divisor -> (B, C_d, h, w), the V pyramid consumed by heads
    """

    attention: Mapping[str, torch.Tensor]
    features: Mapping[str, torch.Tensor]
    concatenated: Mapping[int, torch.Tensor]
    n_tokens: int
    attention_divisors: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("attention", "features", "concatenated", "attention_divisors"):
            object.__setattr__(self, name, MappingProxyType(dict(getattr(self, name))))

    @property
    def layout(self) -> dict[int, int]:
        return {d: int(v.shape[1]) for d, v in self.concatenated.items()}

    @property
    def total_channels(self) -> int:
        return sum(self.layout.values())
