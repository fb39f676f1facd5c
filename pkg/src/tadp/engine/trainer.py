"""Joint backbone + head training and evaluation on an ExperimentConfig."""
from __future__ import annotations

import json
import logging
import random
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from safetensors.torch import load_file, save_file

from ..backbone import BackboneHandle, encode_and_scale, extract_features, load_backbone
from ..captions import CaptionCache
from ..domain import LearnedToken, ModifierKind, install_token, make_modifier
from ..domain.personalization import load_dreambooth
from ..heads import DepthHead, DetectionHead, DetectionHeadConfig, SegHead, depth_loss, detection_loss, seg_loss
from ..prompting import ClassVocabulary, Strategy
from .conditioning import ConditioningProvider
from .metrics import ConfusionMatrix, DepthAccumulator, MetricReport, detection_ap, multiscale_probs
from .schedules import build_lr_scheduler, build_optimizer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class RunResult:
    run_dir: Path
    report: MetricReport
    initial_loss: float
    final_loss: float


@dataclass
class Experiment:
    """Everything a run needs, assembled from a resolved config."""

    cfg: object
    backbone: BackboneHandle
    provider: ConditioningProvider
    head: torch.nn.Module
    class_names: list[str]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def git_rev() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _vocabulary(cfg, dataset) -> ClassVocabulary:
    v = cfg.builder.vocab
    if v is None:
        return ClassVocabulary(tuple(dataset.class_names))
    if Path(v).suffix == ".txt" or "/" in v:
        return ClassVocabulary.from_file(v)
    return ClassVocabulary.builtin(v)


def prepare_backbone(cfg, backbone: BackboneHandle | None = None) -> BackboneHandle:
    """Load the configured backbone and apply the modifier's model modification."""
    backbone = backbone or load_backbone(cfg.backbone.spec)
    kind = ModifierKind(cfg.modifier.kind)
    if kind is ModifierKind.TextualInversion:
        if not cfg.modifier.token_file:
            raise TrainingError("TextualInversion modifier needs modifier.token_file; run `tadp personalize` first")
        install_token(backbone.text_encoder, LearnedToken.load(cfg.modifier.token_file))
    elif kind is ModifierKind.DreamBooth:
        if not cfg.modifier.checkpoint:
            raise TrainingError("DreamBooth modifier needs modifier.checkpoint; run `tadp personalize` first")
        load_dreambooth(backbone, cfg.modifier.checkpoint)
    return backbone


def _modifier(cfg, backbone):
    kind = ModifierKind(cfg.modifier.kind)
    if kind is ModifierKind.Null:
        return None
    learned = None
    if kind is ModifierKind.TextualInversion:
        learned = LearnedToken.load(cfg.modifier.token_file)
    elif kind is ModifierKind.DreamBooth:
        meta = json.loads((Path(cfg.modifier.checkpoint) / "meta.json").read_text())
        from ..domain import token_filename

        learned = LearnedToken.load(Path(cfg.modifier.checkpoint) / token_filename(meta["domain"]))
    return make_modifier(kind, cfg.modifier.domain, learned_token=learned,
                         backbone_override=cfg.modifier.checkpoint if kind is ModifierKind.DreamBooth else None)


def build_experiment(cfg, dataset, backbone: BackboneHandle | None = None) -> Experiment:
    backbone = prepare_backbone(cfg, backbone)
    largest = max(backbone.config.divisors)
    if cfg.dataset.image_size % largest:
        raise TrainingError(f"dataset.image_size={cfg.dataset.image_size} must be a multiple of {largest}")
    vocab = _vocabulary(cfg, dataset)
    strategy = Strategy(cfg.builder.strategy)
    cache = CaptionCache(cfg.builder.cache) if strategy in (Strategy.Caption, Strategy.NounsOnly) else None
    if cache is not None and not Path(cfg.builder.cache).exists():
        raise TrainingError(f"caption cache {cfg.builder.cache} does not exist; run `tadp caption` first")
    provider = ConditioningProvider(
        strategy,
        vocab,
        backbone.text_encoder,
        template=cfg.builder.template,
        caption_cache=cache,
        min_tokens=cfg.builder.min_tokens,
        modifier=_modifier(cfg, backbone),
        precision=cfg.builder.precision,
        recall=cfg.builder.recall,
        seed=cfg.seed,
        pad_to=cfg.builder.pad_to,
        ignore_index=dataset.ignore_index,
    )
    layout = backbone.config.v_layout(provider.n_tokens)
    h = cfg.head
    names = list(dataset.class_names)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        if cfg.task == "segmentation":
            head = SegHead(layout, len(names), h.fpn_channels, h.decoder_channels)
        elif cfg.task == "depth":
            head = DepthHead(layout, h.fpn_channels, h.decoder_channels, h.min_depth, h.max_depth)
        else:
            head = DetectionHead(layout, DetectionHeadConfig(
                num_classes=len(names), fpn_channels=h.fpn_channels, anchor_scale=h.anchor_scale,
                representation_size=h.representation_size))
    return Experiment(cfg, backbone, provider, head, names)


def _batch(dataset, ids):
    samples = [dataset.load(i) for i in ids]
    return samples, torch.stack([s.image for s in samples])


def _features(exp: Experiment, samples, images):
    latent = encode_and_scale(images, exp.backbone)
    return extract_features(latent, [exp.provider(s) for s in samples], exp.backbone)


def _loss(exp: Experiment, samples, images) -> torch.Tensor:
    return _loss_from_features(exp, samples, images, _features(exp, samples, images))


class _MetricsLog:
    def __init__(self, path: Path):
        self.path = path
        path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")


def save_checkpoint(exp: Experiment, directory: Path, step: int) -> Path:
    out = directory / f"step_{step}"
    out.mkdir(parents=True, exist_ok=True)
    save_file({k: v.detach().cpu().contiguous() for k, v in exp.head.state_dict().items()}, str(out / "head.safetensors"))
    if exp.cfg.backbone.train:
        state = {k: v.detach().cpu().contiguous() for k, v in exp.backbone.denoiser.state_dict().items()}
        save_file(state, str(out / "denoiser.safetensors"))
    meta = {"step": step, "config_hash": exp.cfg.config_hash(), "n_tokens": exp.provider.n_tokens}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted((run_dir / "checkpoints").glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise TrainingError(f"no checkpoints under {run_dir}; run `tadp train` first")
    return ckpts[-1]


def load_checkpoint(exp: Experiment, path: Path) -> None:
    exp.head.load_state_dict(load_file(str(path / "head.safetensors")))
    den = path / "denoiser.safetensors"
    if den.exists():
        exp.backbone.denoiser.load_state_dict(load_file(str(den)))


def train(cfg, backbone: BackboneHandle | None = None) -> RunResult:
    """Train per ``cfg`` (resolved ExperimentConfig); writes the run directory."""
    from ..workbench.datasets import open_dataset

    seed_everything(cfg.seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    run_dir = cfg.run_dir
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(cfg.to_toml(), encoding="utf-8")
    mlog = _MetricsLog(run_dir / "metrics.jsonl")

    dataset = open_dataset(cfg.dataset)
    exp = build_experiment(cfg, dataset, backbone)
    schedule = cfg.get_schedule()
    bb = exp.backbone
    for m in bb.modules().values():
        m.requires_grad_(False)
    if cfg.backbone.train:
        bb.denoiser.requires_grad_(True)
    optimizer = build_optimizer(bb.denoiser if cfg.backbone.train else None, exp.head, schedule)
    total = schedule.total_steps(len(dataset))
    scheduler = build_lr_scheduler(optimizer, schedule, total)

    gen = torch.Generator().manual_seed(cfg.seed)
    ids = dataset.ids()
    order: list[int] = []

    def next_ids(n):
        nonlocal order
        out = []
        while len(out) < n:
            if not order:
                order = torch.randperm(len(ids), generator=gen).tolist()
            out.append(ids[order.pop(0)])
        return out

    exp.head.train()
    bb.denoiser.train(cfg.backbone.train)
    initial = final = float("nan")
    log.info("training %s for %d steps (%s)", cfg.name, total, schedule.name)
    for step in range(1, total + 1):
        optimizer.zero_grad(set_to_none=True)
        step_loss = 0.0
        for _ in range(schedule.grad_accumulation):
            samples, images = _batch(dataset, next_ids(schedule.batch_size))
            if cfg.backbone.train:
                loss = _loss(exp, samples, images)
            else:
                with torch.no_grad():
                    v = _features(exp, samples, images)
                loss = _loss_from_features(exp, samples, images, v)
            (loss / schedule.grad_accumulation).backward()
            step_loss += loss.item() / schedule.grad_accumulation
        optimizer.step()
        scheduler.step()
        if step == 1:
            initial = step_loss
        final = step_loss
        if step == 1 or step % max(cfg.schedule.log_every, 1) == 0 or step == total:
            mlog.write({"split": "train", "step": step, "loss": step_loss, "lr": optimizer.param_groups[0]["lr"]})
        if cfg.schedule.checkpoint_every and step % cfg.schedule.checkpoint_every == 0 and step != total:
            save_checkpoint(exp, run_dir / "checkpoints", step)
        if cfg.schedule.eval_every and step % cfg.schedule.eval_every == 0 and step != total:
            report = evaluate(exp, cfg.dataset.eval_split)
            mlog.write({"split": "val", "step": step, **report.metrics})
            exp.head.train()
            bb.denoiser.train(cfg.backbone.train)

    save_checkpoint(exp, run_dir / "checkpoints", total)
    report = evaluate(exp, cfg.dataset.eval_split)
    mlog.write({"split": "val", "step": total, **report.metrics})
    (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return RunResult(run_dir, report, initial, final)


def _loss_from_features(exp, samples, images, v):
    task = exp.cfg.task
    if task == "segmentation":
        return seg_loss(exp.head(v, out_size=images.shape[-2:]), torch.stack([s.mask for s in samples]))
    if task == "depth":
        gt = torch.stack([s.depth for s in samples]).unsqueeze(1)
        return depth_loss(exp.head(v, out_size=images.shape[-2:]), gt, lam=exp.cfg.head.depth_lambda)
    targets = [{"boxes": s.boxes, "labels": s.labels} for s in samples]
    return detection_loss(exp.head(v, tuple(images.shape[-2:]), targets))


@torch.no_grad()
def evaluate(exp: Experiment, split: str | None = None, multi_scale: bool | None = None) -> MetricReport:
    """Metrics over ``split`` in eval mode with a fixed image order."""
    from ..workbench.datasets import open_dataset

    cfg = exp.cfg
    dataset = open_dataset(cfg.dataset, split or cfg.dataset.eval_split)
    multi_scale = cfg.schedule.multi_scale if multi_scale is None else multi_scale
    exp.head.eval()
    exp.backbone.denoiser.eval()
    names = exp.class_names
    meta = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "git_rev": git_rev(),
            "split": dataset.split, "n_images": len(dataset)}

    if cfg.task == "segmentation":
        ss = ConfusionMatrix(len(names), dataset.ignore_index)
        ms = ConfusionMatrix(len(names), dataset.ignore_index)
        for image_id in dataset.ids():
            s = dataset.load(image_id)
            img = s.image.unsqueeze(0)
            cond = exp.provider(s)

            def predict(x, cond=cond):
                return predict_logits(exp, x, cond)

            ss.update(predict(img).argmax(1)[0], s.mask)
            if multi_scale:
                probs = multiscale_probs(predict, img, cfg.schedule.scales, cfg.schedule.flip,
                                         size_multiple=max(exp.backbone.config.divisors))
                ms.update(probs.argmax(1)[0], s.mask)
        iou = ss.iou()
        metrics = {"mIoU_ss": ss.miou(), "mIoU_ms": ms.miou() if multi_scale else None}
        per_class = {n: float(v) for n, v in zip(names, iou) if np.isfinite(v)}
        return MetricReport("segmentation", metrics, per_class, meta)

    if cfg.task == "depth":
        acc = DepthAccumulator()
        for image_id in dataset.ids():
            s = dataset.load(image_id)
            v = _features(exp, [s], s.image.unsqueeze(0))
            pred = exp.head(v, out_size=s.image.shape[-2:])[0, 0]
            acc.update(pred, s.depth)
        return MetricReport("depth", acc.result(), {}, meta)

    preds, gts = [], []
    for image_id in dataset.ids():
        s = dataset.load(image_id)
        v = _features(exp, [s], s.image.unsqueeze(0))
        d = exp.head(v, tuple(s.image.shape[-2:]))[0]
        preds.append({"boxes": d.boxes.numpy(), "labels": d.labels.numpy(), "scores": d.scores.numpy()})
        gts.append({"boxes": s.boxes.numpy(), "labels": s.labels.numpy()})
    res = detection_ap(preds, gts)
    per_class = {names[c]: float(a) for c, a in res["per_class_AP50"].items()}
    return MetricReport("detection", {"AP": res["AP"], "AP50": res["AP50"]}, per_class, meta)


def load_experiment(cfg, run_dir: Path | None = None, backbone: BackboneHandle | None = None) -> Experiment:
    """The experiment of a finished run with its latest checkpoint loaded, in eval mode."""
    from ..workbench.datasets import open_dataset

    seed_everything(cfg.seed)
    exp = build_experiment(cfg, open_dataset(cfg.dataset), backbone)
    load_checkpoint(exp, latest_checkpoint(Path(run_dir or cfg.run_dir)))
    exp.head.eval()
    exp.backbone.denoiser.eval()
    return exp


def predict_logits(exp: Experiment, images: torch.Tensor, conditioning) -> torch.Tensor:
    """Segmentation logits at the input resolution."""
    v = extract_features(encode_and_scale(images, exp.backbone), conditioning, exp.backbone)
    return exp.head(v, out_size=images.shape[-2:])


def evaluate_run(cfg, run_dir: Path | None = None, backbone: BackboneHandle | None = None,
                 multi_scale: bool | None = None) -> MetricReport:
    """Rebuild the experiment, load the latest checkpoint and evaluate."""
    return evaluate(load_experiment(cfg, run_dir, backbone), multi_scale=multi_scale)
