"""img2img-style variation used for the qualitative off-target-class studies."""
from __future__ import annotations

import math

import torch

from .config import StubBackboneError
from .core import BackboneHandle, NoiseSchedule, decode, encode_and_scale
from .text import encode_texts


@torch.no_grad()
def image_variation(
    image: torch.Tensor,
    prompt: str,
    strength: float,
    backbone: BackboneHandle,
    *,
    seed: int = 0,
    num_inference_steps: int = 50,
    guidance_scale: float = 7.5,
) -> torch.Tensor:
    """Noise the encoded image to ~strength*T, denoise under ``prompt`` with DDIM, decode.

    Returns an image tensor in the backbone's pixel range, shape (B, 3, H, W).
    """
    if backbone.is_stub:
        raise StubBackboneError("image_variation needs a pretrained backbone; the stub cannot generate imagery")
    if not 0 < strength <= 1:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    cfg = backbone.config
    schedule = NoiseSchedule(cfg.num_train_timesteps)
    z0 = encode_and_scale(image, backbone).values
    B = z0.shape[0]

    text = backbone.text_encoder
    cond = encode_texts(text, [prompt], pad_to=cfg.max_text_tokens).embeddings
    uncond = encode_texts(text, [""], pad_to=cfg.max_text_tokens).embeddings
    cond, uncond = cond.expand(B, -1, -1), uncond.expand(B, -1, -1)

    step_ratio = cfg.num_train_timesteps // num_inference_steps
    timesteps = (torch.arange(num_inference_steps) * step_ratio + 1).flip(0)
    init_steps = min(math.ceil(num_inference_steps * strength), num_inference_steps)
    timesteps = timesteps[num_inference_steps - init_steps:]

    g = torch.Generator().manual_seed(seed)
    noise = torch.randn(z0.shape, generator=g).to(z0)
    z = schedule.add_noise(z0, noise, timesteps[:1].expand(B))
    ab_all = schedule.alphas_cumprod.float()
    for t in timesteps:
        tt = t.expand(B).to(z.device)
        if guidance_scale != 1.0:
            eps_u = backbone.denoiser(z, tt, uncond)
            eps_c = backbone.denoiser(z, tt, cond)
            eps = eps_u + guidance_scale * (eps_c - eps_u)
        else:
            eps = backbone.denoiser(z, tt, cond)
        ab = ab_all[t]
        prev = int(t) - step_ratio
        ab_prev = ab_all[prev] if prev >= 0 else torch.tensor(1.0)
        x0 = (z - (1 - ab).sqrt() * eps) / ab.sqrt()
        z = ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps
    return decode(z, backbone).clamp(-1, 1)
