"""Textual Inversion and DreamBooth on a handful of target-domain images."""
from __future__ import annotations

import json
import logging
import random
import shutil
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from ..backbone import BackboneHandle, NoiseSchedule, StubBackboneError, encode_and_scale
from ..backbone.text import build_input_ids
from .modifiers import DB_TOKEN, TI_TOKEN, LearnedToken, install_token, token_filename

log = logging.getLogger(__name__)


def load_ti_templates() -> list[str]:
    text = resources.files("tadp.data").joinpath("ti_templates.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


@dataclass
class PersonalizationConfig:
    steps: int
    learning_rate: float
    image_set: list[str] = field(default_factory=list)
    resolution: int = 512
    batch_size: int = 1
    grad_accumulation: int = 1
    seed: int = 0
    init_word: str = "painting"
    templates: list[str] = field(default_factory=load_ti_templates)
    prior_preservation: bool = False
    prior_images: int = 200

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("batch_size and grad_accumulation must be >= 1")
        if self.prior_preservation:
            raise NotImplementedError("prior preservation is not implemented; the reference runs disable it")
        if not self.templates or any(t.count("{}") != 1 for t in self.templates):
            raise ValueError("each template needs exactly one {} placeholder")


def textual_inversion_config(**overrides) -> PersonalizationConfig:
    """Hyperparameter-table defaults; ``steps=1000`` gives the shorter prose setting."""
    return replace(PersonalizationConfig(steps=3000, learning_rate=5e-4, batch_size=1, grad_accumulation=4), **overrides)


def dreambooth_config(**overrides) -> PersonalizationConfig:
    """Hyperparameter-table defaults; the prose describes lr 2e-6 and 500 steps for night driving."""
    return replace(PersonalizationConfig(steps=1000, learning_rate=5e-6, batch_size=1, grad_accumulation=1), **overrides)


def denoising_loss(
    backbone: BackboneHandle,
    latents: torch.Tensor,
    input_ids: torch.Tensor,
    generator: torch.Generator,
    schedule: NoiseSchedule | None = None,
) -> torch.Tensor:
    """E||eps - eps_theta(z_t, t, tau(y))||^2 with t ~ U{0..T-1}."""
    schedule = schedule or NoiseSchedule(backbone.config.num_train_timesteps)
    B = latents.shape[0]
    t = torch.randint(0, schedule.T, (B,), generator=generator)
    noise = torch.randn(latents.shape, generator=generator).to(latents)
    zt = schedule.add_noise(latents, noise, t)
    context = backbone.text_encoder(input_ids.to(latents.device))
    pred = backbone.denoiser(zt, t.to(latents.device), context)
    return F.mse_loss(pred, noise)


def load_image_set(paths, resolution: int) -> torch.Tensor:
    """Read, center-crop and resize images to (N, 3, r, r) in [-1, 1]."""
    from PIL import Image, ImageOps

    out = []
    for p in paths:
        with Image.open(p) as im:
            im = ImageOps.fit(im.convert("RGB"), (resolution, resolution), Image.Resampling.BICUBIC)
            arr = torch.from_numpy(np.asarray(im).copy())
        out.append(arr.permute(2, 0, 1).float() / 127.5 - 1.0)
    return torch.stack(out) if out else torch.empty(0, 3, resolution, resolution)


def _check_inputs(backbone, images, cfg, allow_stub: bool, what: str) -> torch.Tensor:
    if backbone.is_stub and not allow_stub:
        raise StubBackboneError(f"{what} needs real weights; pass allow_stub=True only for tests")
    if images is None:
        images = load_image_set(cfg.image_set, cfg.resolution)
    if len(images) == 0:
        raise ValueError(f"{what} needs at least one image")
    return images


def _prompt_ids(backbone, templates, token, idx, rng: random.Random) -> torch.Tensor:
    prompts = [rng.choice(templates).format(token) for _ in idx]
    ids, *_ = build_input_ids(backbone.text_encoder, prompts)
    return ids


def _latents(backbone: BackboneHandle, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return encode_and_scale(images, backbone).values


def _run(backbone, cfg, latents, token, trainable, token_id, frozen_rows) -> None:
    """Shared optimisation loop. ``frozen_rows`` are restored after every step."""
    emb = backbone.text_encoder.get_input_embeddings().weight
    keep = torch.ones(emb.shape[0], dtype=torch.bool)
    keep[token_id] = False
    opt = torch.optim.AdamW(trainable, lr=cfg.learning_rate, weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    schedule = NoiseSchedule(backbone.config.num_train_timesteps)
    n = latents.shape[0]
    for step in range(cfg.steps):
        opt.zero_grad(set_to_none=True)
        total = 0.0
        for _ in range(cfg.grad_accumulation):
            idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
            ids = _prompt_ids(backbone, cfg.templates, token, idx, rng)
            loss = denoising_loss(backbone, latents[idx], ids, gen, schedule) / cfg.grad_accumulation
            loss.backward()
            total += loss.item()
        opt.step()
        with torch.no_grad():
            emb[keep] = frozen_rows[keep]
        if step % 100 == 0 or step == cfg.steps - 1:
            log.info("%s step %d/%d loss %.4f", token, step + 1, cfg.steps, total)


def _freeze(backbone: BackboneHandle) -> dict[str, bool]:
    flags = {}
    for name, module in backbone.modules().items():
        for pname, p in module.named_parameters():
            flags[f"{name}.{pname}"] = p.requires_grad
            p.requires_grad_(False)
    return flags


def _restore_flags(backbone: BackboneHandle, flags: dict[str, bool]) -> None:
    for name, module in backbone.modules().items():
        for pname, p in module.named_parameters():
            p.requires_grad_(flags.get(f"{name}.{pname}", False))


def train_textual_inversion(
    images: torch.Tensor | None,
    backbone: BackboneHandle,
    cfg: PersonalizationConfig | None = None,
    token: str = TI_TOKEN,
    allow_stub: bool = False,
) -> LearnedToken:
    """Learn one token embedding; every other weight stays bitwise unchanged.

    ``images`` are (N, 3, H, W) in [-1, 1]; with None they are read from
    ``cfg.image_set``. The token is added to the backbone's text encoder as
    a side effect.
    """
    cfg = cfg or textual_inversion_config()
    images = _check_inputs(backbone, images, cfg, allow_stub, "textual inversion")
    latents = _latents(backbone, images)
    token_id = backbone.text_encoder.add_token(token, cfg.init_word)
    weight = backbone.text_encoder.get_input_embeddings().weight
    initial = weight.detach().clone()
    flags = _freeze(backbone)
    weight.requires_grad_(True)
    try:
        if cfg.steps:
            _run(backbone, cfg, latents, token, [weight], token_id, initial)
    finally:
        _restore_flags(backbone, flags)
    return LearnedToken(token, weight[token_id].detach().clone())


def _weights_nbytes(module: torch.nn.Module) -> int:
    return sum(t.numel() * t.element_size() for t in module.state_dict().values())


def train_dreambooth(
    images: torch.Tensor | None,
    backbone: BackboneHandle,
    out_dir: str | Path,
    cfg: PersonalizationConfig | None = None,
    token: str = DB_TOKEN,
    domain: str = "target",
    allow_stub: bool = False,
) -> tuple[LearnedToken, Path]:
    """Fine-tune the denoiser together with a rare-token embedding.

    Writes ``denoiser.safetensors``, the token file and ``meta.json`` into
    ``out_dir``; returns the token and the checkpoint directory.
    """
    cfg = cfg or dreambooth_config()
    images = _check_inputs(backbone, images, cfg, allow_stub, "dreambooth")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    need = _weights_nbytes(backbone.denoiser)
    free = shutil.disk_usage(out_dir).free
    if free < 1.1 * need:
        raise OSError(f"dreambooth checkpoint needs ~{need} bytes, only {free} free in {out_dir}")

    latents = _latents(backbone, images)
    token_id = backbone.text_encoder.add_token(token, cfg.init_word)
    weight = backbone.text_encoder.get_input_embeddings().weight
    initial = weight.detach().clone()
    flags = _freeze(backbone)
    weight.requires_grad_(True)
    denoiser_params = list(backbone.denoiser.parameters())
    for p in denoiser_params:
        p.requires_grad_(True)
    try:
        if cfg.steps:
            _run(backbone, cfg, latents, token, [weight, *denoiser_params], token_id, initial)
    finally:
        _restore_flags(backbone, flags)

    learned = LearnedToken(token, weight[token_id].detach().clone())
    state = {k: v.detach().cpu().contiguous() for k, v in backbone.denoiser.state_dict().items()}
    save_file(state, str(out_dir / "denoiser.safetensors"))
    learned.save(out_dir / token_filename(domain))
    meta = {"source": backbone.source, "token": token, "domain": domain, "config": asdict(cfg)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return learned, out_dir


def load_dreambooth(backbone: BackboneHandle, checkpoint_dir: str | Path) -> LearnedToken:
    """Load a DreamBooth checkpoint into ``backbone`` in place."""
    checkpoint_dir = Path(checkpoint_dir)
    meta = json.loads((checkpoint_dir / "meta.json").read_text(encoding="utf-8"))
    state = load_file(str(checkpoint_dir / "denoiser.safetensors"))
    backbone.denoiser.load_state_dict(state)
    learned = LearnedToken.load(checkpoint_dir / token_filename(meta["domain"]))
    install_token(backbone.text_encoder, learned)
    return learned
