"""Backbone handle plus the encode / extract / aggregate operations."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import (
    BackboneConfig,
    DimensionMismatchError,
    FeatureBundle,
    ScaledLatent,
    SiteCaptureError,
    TokenOverflowError,
    default_stub_config,
)
from .stub import StubDecoder, StubDenoiser, StubEncoder
from .text import FixtureTextEncoder, TextEncoder

log = logging.getLogger(__name__)


@dataclass
class BackboneHandle:
    encoder: nn.Module
    denoiser: nn.Module
    text_encoder: TextEncoder
    decoder: nn.Module
    config: BackboneConfig
    is_stub: bool = False
    source: str = ""

    def modules(self) -> dict[str, nn.Module]:
        return {
            "encoder": self.encoder,
            "denoiser": self.denoiser,
            "text_encoder": self.text_encoder,
            "decoder": self.decoder,
        }

    def to(self, device) -> "BackboneHandle":
        for m in self.modules().values():
            m.to(device)
        return self


def make_stub_backbone(config: BackboneConfig | None = None, seed: int = 0) -> BackboneHandle:
    """Randomly initialised backbone honouring ``config``; deterministic in ``seed``."""
    config = config or default_stub_config()
    encoder = StubEncoder(config.latent_channels, config.latent_downsample, seed=seed)
    text = FixtureTextEncoder(embed_dim=config.embed_dim, max_tokens=config.max_text_tokens, seed=seed)
    return BackboneHandle(
        encoder=encoder,
        denoiser=StubDenoiser(config, seed=seed),
        text_encoder=text,
        decoder=StubDecoder(encoder),
        config=config,
        is_stub=True,
        source=f"stub:{seed}",
    )


def _as_batch(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 3:
        image = image.unsqueeze(0)
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionMismatchError(f"expected (B, 3, H, W) image, got {tuple(image.shape)}")
    return image


def encode_raw(image: torch.Tensor, backbone: BackboneHandle) -> torch.Tensor:
    """Mode of the encoder's latent distribution (no sampling)."""
    image = _as_batch(image)
    d = backbone.config.latent_downsample
    H, W = image.shape[-2:]
    if H % d or W % d:
        raise DimensionMismatchError(f"image size {H}x{W} not divisible by latent_downsample={d}")
    moments = backbone.encoder(image)
    return moments[:, : backbone.config.latent_channels]


def encode_and_scale(image: torch.Tensor, backbone: BackboneHandle) -> ScaledLatent:
    raw = encode_raw(image, backbone)
    return ScaledLatent(raw * backbone.config.scale_factor, backbone.config.scale_factor, 0)


def unscale(latent: ScaledLatent) -> torch.Tensor:
    if latent.scale_factor <= 0:
        raise ValueError("scale_factor must be positive")
    return latent.values / latent.scale_factor


def decode(latent: ScaledLatent | torch.Tensor, backbone: BackboneHandle) -> torch.Tensor:
    raw = unscale(latent) if isinstance(latent, ScaledLatent) else latent / backbone.config.scale_factor
    return backbone.decoder(raw)


def _context(conditioning, batch: int, config: BackboneConfig) -> torch.Tensor:
    if isinstance(conditioning, (list, tuple)):
        mats = [getattr(c, "embeddings", c) for c in conditioning]
        lengths = {m.shape[0] for m in mats}
        if len(lengths) != 1:
            raise ValueError(f"conditionings in a batch must share a row count, got {sorted(lengths)}")
        ctx = torch.stack(mats)
    else:
        ctx = getattr(conditioning, "embeddings", conditioning)
        if ctx.ndim == 2:
            ctx = ctx.unsqueeze(0)
    if ctx.shape[0] == 1 and batch > 1:
        ctx = ctx.expand(batch, -1, -1)
    if ctx.shape[0] != batch:
        raise ValueError(f"{ctx.shape[0]} conditionings for a batch of {batch}")
    if ctx.shape[1] > config.max_text_tokens:
        raise TokenOverflowError(f"conditioning has {ctx.shape[1]} rows, max_text_tokens={config.max_text_tokens}")
    if ctx.shape[2] != config.embed_dim:
        raise ValueError(f"conditioning width {ctx.shape[2]} != embed_dim {config.embed_dim}")
    return ctx


def extract_features(latent: ScaledLatent, conditioning, backbone: BackboneHandle) -> FeatureBundle:
    """One denoiser pass at t=0 capturing attention probabilities and features.

    ``conditioning`` is a ConditioningMatrix, an (N, D)/(B, N, D) tensor, or a
    sequence of ConditioningMatrix with equal row counts (one per image).
    Gradients are not blocked here; wrap in ``torch.no_grad()`` for inference.
    """
    cfg = backbone.config
    z = latent.values
    ctx = _context(conditioning, z.shape[0], cfg).to(dtype=z.dtype, device=z.device)
    n_tokens = ctx.shape[1]
    t = torch.zeros(z.shape[0], dtype=torch.long, device=z.device)
    with backbone.denoiser.capture() as rec:
        backbone.denoiser(z, t, ctx)
    attention = {}
    for site in cfg.attention_sites:
        if site.layer_id not in rec.attention:
            raise SiteCaptureError(f"attention site {site.layer_id!r} produced no capture")
        attention[site.layer_id] = rec.attention[site.layer_id]
    features = {}
    for s in cfg.feature_scales:
        if s.scale_id not in rec.features:
            raise SiteCaptureError(f"feature scale {s.scale_id!r} produced no capture")
        features[s.scale_id] = rec.features[s.scale_id]

    lh, lw = z.shape[-2:]
    pyramid = {}
    for d in cfg.divisors:
        ratio = d // cfg.latent_downsample
        grid = (-(-lh // ratio), -(-lw // ratio))
        parts = [attention[a.layer_id].mean(dim=1) for a in cfg.attention_sites if a.divisor == d]
        parts += [features[s.scale_id] for s in cfg.feature_scales if s.divisor == d]
        parts = [p if p.shape[-2:] == grid else F.interpolate(p, size=grid, mode="bilinear", align_corners=False)
                 for p in parts]
        pyramid[d] = torch.cat(parts, dim=1)
    return FeatureBundle(
        attention=attention,
        features=features,
        concatenated=pyramid,
        n_tokens=n_tokens,
        attention_divisors={a.layer_id: a.divisor for a in cfg.attention_sites},
    )


def aggregate_attention(bundle: FeatureBundle, out_resolution: int | Sequence[int] = 64,
                        layers: Sequence[str] | None = None) -> torch.Tensor:
    """Per-token maps (B, tokens, R, R): bilinear upsample, mean over heads and sites."""
    if not bundle.attention:
        raise ValueError("bundle has no attention sites")
    if isinstance(out_resolution, int):
        out_resolution = (out_resolution, out_resolution)
    size = tuple(out_resolution)
    names = list(layers) if layers is not None else list(bundle.attention)
    acc = None
    for name in names:
        m = bundle.attention[name].mean(dim=1)
        if m.shape[-2:] != size:
            m = F.interpolate(m, size=size, mode="bilinear", align_corners=False)
        acc = m if acc is None else acc + m
    return acc / len(names)


class NoiseSchedule:
    """Scaled-linear DDPM schedule of the reference latent diffusion model."""

    def __init__(self, num_train_timesteps: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012):
        self.T = num_train_timesteps
        betas = torch.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=torch.float64) ** 2
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    def alpha_bar(self, t: torch.Tensor) -> torch.Tensor:
        return self.alphas_cumprod[t.cpu()].float()

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar(t).to(z0.device).view(-1, *([1] * (z0.ndim - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise
