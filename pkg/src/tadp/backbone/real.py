"""Adapter exposing a ``diffusers`` Stable Diffusion stack as a BackboneHandle."""
from __future__ import annotations

import re
from contextlib import contextmanager
from pathlib import Path

import torch
from torch import nn

from .config import AttentionSite, BackboneConfig, FeatureScale
from .stub import CaptureRecord
from .text import ClipTextEncoder, TextEncoder


class CapturingAttnProcessor:
    """Classic (non-fused) attention that also records post-softmax probabilities."""

    def __init__(self, name: str, owner: "DiffusersDenoiser"):
        self.name = name
        self.owner = owner

    def __call__(self, attn, hidden_states, encoder_hidden_states=None, attention_mask=None, temb=None, *args, **kwargs):
        residual = hidden_states
        input_ndim = hidden_states.ndim
        if input_ndim == 4:
            b, c, h, w = hidden_states.shape
            hidden_states = hidden_states.view(b, c, h * w).transpose(1, 2)
        batch, seq_len, _ = hidden_states.shape if encoder_hidden_states is None else encoder_hidden_states.shape
        attention_mask = attn.prepare_attention_mask(attention_mask, seq_len, batch)
        if attn.group_norm is not None:
            hidden_states = attn.group_norm(hidden_states.transpose(1, 2)).transpose(1, 2)
        query = attn.to_q(hidden_states)
        if encoder_hidden_states is None:
            encoder_hidden_states = hidden_states
        elif attn.norm_cross:
            encoder_hidden_states = attn.norm_encoder_hidden_states(encoder_hidden_states)
        key = attn.to_k(encoder_hidden_states)
        value = attn.to_v(encoder_hidden_states)
        query, key, value = (attn.head_to_batch_dim(x) for x in (query, key, value))
        probs = attn.get_attention_scores(query, key, attention_mask)
        sink = self.owner.sink
        if sink is not None:
            B = hidden_states.shape[0]
            gh, gw = self.owner.grid_for(self.name)
            n = probs.shape[-1]
            sink[self.name] = probs.view(B, attn.heads, gh * gw, n).transpose(-1, -2).reshape(B, attn.heads, n, gh, gw)
        hidden_states = attn.batch_to_head_dim(torch.bmm(probs, value))
        hidden_states = attn.to_out[1](attn.to_out[0](hidden_states))
        if input_ndim == 4:
            hidden_states = hidden_states.transpose(-1, -2).reshape(b, c, h, w)
        if attn.residual_connection:
            hidden_states = hidden_states + residual
        return hidden_states / attn.rescale_output_factor


def _site_divisor(name: str, n_levels: int, ld: int) -> int:
    if name.startswith("mid_block"):
        return ld * 2 ** (n_levels - 1)
    m = re.match(r"(down|up)_blocks\.(\d+)\.", name)
    i = int(m.group(2))
    return ld * 2 ** (i if m.group(1) == "down" else n_levels - 1 - i)


class DiffusersDenoiser(nn.Module):
    def __init__(self, unet, latent_downsample: int = 8):
        super().__init__()
        self.unet = unet
        self.latent_downsample = latent_downsample
        n = len(unet.config.block_out_channels)
        self.site_divisors: dict[str, int] = {}
        self.site_heads: dict[str, int] = {}
        processors = {}
        for name, module in unet.named_modules():
            if name.endswith("attn2"):
                self.site_divisors[name] = _site_divisor(name, n, latent_downsample)
                self.site_heads[name] = module.heads
                processors[name] = CapturingAttnProcessor(name, self)
        for name, module in unet.named_modules():
            if name in processors:
                module.set_processor(processors[name])
        self.feature_scales: list[FeatureScale] = []
        rev = list(reversed(unet.config.block_out_channels))
        for i, block in enumerate(unet.up_blocks):
            div = latent_downsample * 2 ** (n - 1 - i)
            if getattr(block, "upsamplers", None):
                div //= 2
            self.feature_scales.append(FeatureScale(f"up_blocks.{i}", rev[i], div))
        self.sink: dict | None = None
        self._latent_hw = (0, 0)

    def grid_for(self, name: str) -> tuple[int, int]:
        ratio = self.site_divisors[name] // self.latent_downsample
        h, w = self._latent_hw
        return -(-h // ratio), -(-w // ratio)

    @contextmanager
    def capture(self):
        rec = CaptureRecord()
        self.sink = rec.attention
        handles = []
        for i, block in enumerate(self.unet.up_blocks):
            def hook(module, inputs, output, key=f"up_blocks.{i}"):
                rec.features[key] = output[0] if isinstance(output, tuple) else output
            handles.append(block.register_forward_hook(hook))
        try:
            yield rec
        finally:
            self.sink = None
            for h in handles:
                h.remove()

    def forward(self, z, t, context):
        self._latent_hw = tuple(z.shape[-2:])
        return self.unet(z, t, encoder_hidden_states=context).sample


class VaeEncoder(nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.vae = vae

    def forward(self, image):
        dist = self.vae.encode(image).latent_dist
        return torch.cat([dist.mean, dist.logvar], dim=1)


class VaeDecoder(nn.Module):
    def __init__(self, vae):
        super().__init__()
        self.vae = vae

    def forward(self, latent):
        return self.vae.decode(latent).sample


def backbone_from_components(vae, unet, text_encoder: TextEncoder, source: str = "components"):
    from .core import BackboneHandle

    ld = 2 ** (len(vae.config.block_out_channels) - 1)
    denoiser = DiffusersDenoiser(unet, ld)
    config = BackboneConfig(
        feature_scales=tuple(denoiser.feature_scales),
        attention_sites=tuple(
            AttentionSite(name, denoiser.site_heads[name], denoiser.site_divisors[name]) for name in denoiser.site_divisors
        ),
        latent_channels=vae.config.latent_channels,
        latent_downsample=ld,
        max_text_tokens=text_encoder.max_tokens,
        embed_dim=unet.config.cross_attention_dim,
        scale_factor=float(getattr(vae.config, "scaling_factor", 0.18215)),
        num_train_timesteps=1000,
    )
    for m in (vae, unet):
        m.eval()
    return BackboneHandle(VaeEncoder(vae), denoiser, text_encoder, VaeDecoder(vae), config, False, source)


def load_pretrained_backbone(path: str | Path):
    """Load a Stable Diffusion checkpoint: a diffusers directory or a single safetensors file."""
    path = Path(path)
    if path.is_file():
        from diffusers import StableDiffusionPipeline

        pipe = StableDiffusionPipeline.from_single_file(str(path))
        text = ClipTextEncoder(pipe.tokenizer, pipe.text_encoder)
        return backbone_from_components(pipe.vae, pipe.unet, text, source=f"real:{path}")
    from diffusers import AutoencoderKL, UNet2DConditionModel

    vae = AutoencoderKL.from_pretrained(path, subfolder="vae")
    unet = UNet2DConditionModel.from_pretrained(path, subfolder="unet")
    text = ClipTextEncoder.from_pretrained(str(path))
    return backbone_from_components(vae, unet, text, source=f"real:{path}")
