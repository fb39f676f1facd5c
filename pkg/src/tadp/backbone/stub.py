"""Desk-scale stand-ins for the encoder, decoder and conditional denoiser.

The stub autoencoder is linear: each ``d x d`` pixel block is projected onto
``latent_channels`` orthonormal directions whose first three span the block's
per-channel mean colour, and the decoder is the exact transpose. Images that
are constant on blocks therefore reconstruct to float precision.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import BackboneConfig


def _groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _block_basis(latent_channels: int, d: int, seed: int) -> torch.Tensor:
    """(latent_channels, 3*d*d) orthonormal rows; rows 0..2 are channel means."""
    n = 3 * d * d
    rows = []
    for c in range(min(3, latent_channels)):
        v = torch.zeros(3, d * d)
        v[c] = 1.0
        rows.append(v.flatten())
    g = torch.Generator().manual_seed(seed)
    extra = latent_channels - len(rows)
    if extra > 0:
        rows.append(torch.randn(extra, n, generator=g))
    basis = torch.cat([r.reshape(-1, n) for r in rows])
    q, _ = torch.linalg.qr(basis.T)
    q = q.T[:latent_channels]
    # QR may flip signs; keep the mean rows positive for readability
    return q * torch.sign(q.sum(dim=1, keepdim=True) + 1e-12)


class StubEncoder(nn.Module):
    """Returns Gaussian moments (mean, logvar) like a VAE encoder."""

    def __init__(self, latent_channels: int, downsample: int, seed: int = 0):
        super().__init__()
        self.downsample = downsample
        self.register_buffer("basis", _block_basis(latent_channels, downsample, seed))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        blocks = F.pixel_unshuffle(image, self.downsample)  # (B, 3*d*d, h, w)
        # pixel_unshuffle orders channels as (c, dy, dx), matching the basis layout
        mean = torch.einsum("kn,bnhw->bkhw", self.basis, blocks)
        return torch.cat([mean, torch.full_like(mean, -30.0)], dim=1)


class StubDecoder(nn.Module):
    def __init__(self, encoder: StubEncoder):
        super().__init__()
        self.downsample = encoder.downsample
        self.register_buffer("basis", encoder.basis.clone())

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        blocks = torch.einsum("kn,bkhw->bnhw", self.basis, latent)
        return F.pixel_shuffle(blocks, self.downsample)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Image queries attend over text tokens. While ``sink`` is set the
    post-softmax probabilities are written to ``sink[name]`` as (B, heads, N, h, w)."""

    def __init__(self, channels: int, context_dim: int, heads: int, head_dim: int = 16):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, channels)
        self.name = ""
        self.sink: dict | None = None

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        B, C, H, W = x.shape
        N = context.shape[1]
        q = self.to_q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, inner)
        k, v = self.to_k(context), self.to_v(context)
        q = q.view(B, H * W, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, N, self.heads, self.head_dim).transpose(1, 2)
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        if self.sink is not None:
            self.sink[self.name] = probs.transpose(-1, -2).reshape(B, self.heads, N, H, W)
        out = (probs @ v).transpose(1, 2).reshape(B, H * W, -1)
        return x + self.to_out(out).transpose(1, 2).reshape(B, C, H, W)


@dataclass
class CaptureRecord:
    attention: dict[str, torch.Tensor] = field(default_factory=dict)
    features: dict[str, torch.Tensor] = field(default_factory=dict)


class StubDenoiser(nn.Module):
    """Small U-Net honouring a BackboneConfig.

    Cross-attention sites sit on the downward path at their divisor, feature
    scales are the outputs of up-path blocks at theirs.
    """

    def __init__(self, config: BackboneConfig, base_channels: int = 32, temb_dim: int = 64, seed: int = 0):
        super().__init__()
        self.config = config
        self.temb_dim = temb_dim
        levels = sorted({config.latent_downsample, *config.divisors})
        self.levels = levels
        widths = []
        for d in levels:
            chans = [s.channels for s in config.feature_scales if s.divisor == d]
            widths.append(max(chans) if chans else (widths[-1] if widths else base_channels))
        self.widths = widths
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(nn.Linear(temb_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
            self.conv_in = nn.Conv2d(config.latent_channels, widths[0], 3, padding=1)
            self.down_res = nn.ModuleList()
            self.down_attn = nn.ModuleDict()
            self.down_sample = nn.ModuleList()
            prev = widths[0]
            for i, (d, w) in enumerate(zip(levels, widths)):
                if i > 0:
                    factor = d // levels[i - 1]
                    self.down_sample.append(nn.Conv2d(prev, prev, 3, stride=factor, padding=1))
                self.down_res.append(ResBlock(prev, w, temb_dim))
                for site in config.attention_sites:
                    if site.divisor == d:
                        self.down_attn[site.layer_id] = CrossAttention(w, config.embed_dim, site.heads)
                prev = w
            self.up_blocks = nn.ModuleDict()
            self.up_plain = nn.ModuleDict()
            for i in reversed(range(len(levels))):
                d, w = levels[i], widths[i]
                cin = prev + w
                scales = [s for s in config.feature_scales if s.divisor == d]
                if not scales:
                    self.up_plain[str(d)] = ResBlock(cin, w, temb_dim)
                    prev = w
                for s in scales:
                    self.up_blocks[s.scale_id] = ResBlock(cin, s.channels, temb_dim)
                    cin = prev = s.channels
            self.norm_out = nn.GroupNorm(_groups(prev), prev)
            self.conv_out = nn.Conv2d(prev, config.latent_channels, 3, padding=1)

    @contextmanager
    def capture(self):
        rec = CaptureRecord()
        handles = []
        for name, block in self.up_blocks.items():
            handles.append(block.register_forward_hook(self._feature_hook(name, rec)))
        for name, attn in self.down_attn.items():
            attn.name, attn.sink = name, rec.attention
        try:
            yield rec
        finally:
            for h in handles:
                h.remove()
            for attn in self.down_attn.values():
                attn.sink = None

    @staticmethod
    def _feature_hook(name, rec):
        def hook(module, inputs, output):
            rec.features[name] = output
        return hook

    def forward(self, z: torch.Tensor, t: torch.Tensor | int, context: torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor([t])
        t = t.to(z.device).reshape(-1).expand(z.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.temb_dim).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for i, d in enumerate(self.levels):
            if i > 0:
                h = self.down_sample[i - 1](h)
            h = self.down_res[i](h, temb)
            for site in self.config.attention_sites:
                if site.divisor == d:
                    attn = self.down_attn[site.layer_id]
                    h = attn(h, context)
            skips.append(h)
        for i in reversed(range(len(self.levels))):
            d = self.levels[i]
            skip = skips[i]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = torch.cat([h, skip], dim=1)
            scales = [s for s in self.config.feature_scales if s.divisor == d]
            if not scales:
                h = self.up_plain[str(d)](h, temb)
            for s in scales:
                h = self.up_blocks[s.scale_id](h, temb)
        return self.conv_out(F.silu(self.norm_out(h)))
