"""``tadp`` command line: synth, caption, clean, personalize, train, eval, analyze, plot.

Exit codes: 0 success, 1 invalid input (bad flags, config or arguments),
2 runtime failure. Logs go to stderr; results are written to files.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..captions import CaptionCache, CaptionServiceError, CleanCache, batch_caption, captioner_from_env, clean_caption, cleaner_from_env
from ..domain import ModifierKind, token_filename
from .config import ConfigError, load_config
from .datasets import DatasetError, open_dataset

log = logging.getLogger("tadp")


class UsageError(Exception):
    """Invalid invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("-c", "--config", required=True, help="experiment TOML file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--output", help="override the output directory")
    p.add_argument("--fixture-dir", help="offline caption/clean fixtures")
    p.add_argument("--backbone", help="real:<path> or stub:<seed>")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tadp", description="Text-aligned diffusion perception workbench.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic shapes dataset")
    p.add_argument("out", help="dataset directory")
    p.add_argument("--kind", choices=("seg", "depth", "det"), default="seg")
    p.add_argument("--n-images", type=int, default=16)
    p.add_argument("--n-val", type=int, default=0)
    p.add_argument("--n-classes", type=int, default=3)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")

    for name, helptext in (("caption", "caption every image into the cache"),
                           ("clean", "strip target-domain style words from cached captions")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--jobs", type=int, default=1, help="parallel requests")

    p = sub.add_parser("personalize", help="learn a domain token (TI) or fine-tune the denoiser (DB)")
    _common(p)
    p.add_argument("--method", choices=("ti", "db"), required=True)
    p.add_argument("--steps", type=int, help="override the method's step count")

    p = sub.add_parser("train", help="train a perception head")
    _common(p)

    p = sub.add_parser("eval", help="evaluate the latest checkpoint of a run")
    _common(p)
    p.add_argument("--split", help="dataset split (default: the eval split)")
    p.add_argument("--multi-scale", action="store_true")

    p = sub.add_parser("analyze", help="post-hoc analyses of a trained run")
    asub = p.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    a = asub.add_parser("attention", help="per-token cross-attention maps")
    _common(a)
    a.add_argument("--image", required=True, help="image id")
    a.add_argument("--tokens", required=True, help="comma-separated words")
    a.add_argument("--caption", help="prompt text (default: the image's class names)")
    a.add_argument("--resolution", type=int, default=64)
    for name in ("recall", "size", "confusion"):
        a = asub.add_parser(name, help=f"{name} analysis")
        _common(a)
    a = asub.add_parser("copy-paste", help="attention before and after pasting an object")
    _common(a)
    a.add_argument("--image", required=True, help="base image id")
    a.add_argument("--source", required=True, help="image id to cut the object from")
    a.add_argument("--class", dest="cls", required=True, help="class name of the object")
    a.add_argument("--at", help="top,left of the pasted patch (default: centred)")
    a.add_argument("--tokens", required=True, help="comma-separated words")
    a.add_argument("--resolution", type=int, default=64)

    p = sub.add_parser("plot", help="figures and CSV from a run directory")
    p.add_argument("-c", "--config", help="experiment TOML (plots its run directory)")
    p.add_argument("--run", help="run directory")
    p.add_argument("--compare", nargs="+", help="run directories to compare")
    p.add_argument("--metric", default="mIoU_ss", help="metric for --compare")
    p.add_argument("--output", help="output directory for --compare")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    return load_config(args.config, seed=args.seed, output=args.output, fixture_dir=args.fixture_dir,
                       backbone=args.backbone)


class _Images:
    """Adapts one or more dataset splits to the captioning ImageSource protocol."""

    def __init__(self, datasets):
        self._by_id = {}
        for ds in datasets:
            for i in ds.ids():
                self._by_id.setdefault(i, ds)

    def image_ids(self):
        return sorted(self._by_id)

    def image(self, image_id):
        return self._by_id[image_id].image(image_id)


def _caption_cache_path(cfg) -> Path:
    from ..captions import cache_filename

    if cfg.builder.cache:
        return Path(cfg.builder.cache)
    return Path(cfg.dataset.root) / cache_filename(cfg.dataset.name, "Caption", cfg.builder.min_tokens)


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    try:
        out = synth_dataset(args.out, args.kind, args.n_images, args.n_classes, args.seed, args.size, args.n_val)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("wrote %s", out)
    return 0


def cmd_caption(args) -> int:
    cfg = _config(args)
    splits = dict.fromkeys([cfg.dataset.split, cfg.dataset.eval_split])
    source = _Images([open_dataset(cfg.dataset, s) for s in splits])
    client = captioner_from_env(cfg.fixture_dir)
    report = batch_caption(source, cfg.builder.min_tokens, client, _caption_cache_path(cfg), parallelism=args.jobs)
    log.info("%d captions in %s (%d new)", report.n_records, report.cache_path, report.client_calls)
    if not report.ok:
        log.error("%d images failed; see %s.failures.json", len(report.failed), report.cache_path)
        return 2
    return 0


def cmd_clean(args) -> int:
    from concurrent.futures import ThreadPoolExecutor

    cfg = _config(args)
    domain = cfg.modifier.domain
    if not domain:
        raise UsageError("clean needs modifier.domain in the config")
    path = _caption_cache_path(cfg)
    if not path.exists():
        raise UsageError(f"caption cache {path} does not exist; run `tadp caption` first")
    cache = CaptionCache(path)
    clean_cache = CleanCache(path.with_name(path.stem + f".clean_{domain}.jsonl"))
    client = cleaner_from_env(cfg.fixture_dir)
    records = list(cache)

    def work(rec):
        return dataclasses.replace(rec, cleaned=clean_caption(rec.caption, domain, client, clean_cache))

    with ThreadPoolExecutor(max_workers=max(args.jobs, 1)) as pool:
        cleaned = list(pool.map(work, records))
    for rec in cleaned:
        cache.put(rec)
    cache.finalize()
    clean_cache.finalize()
    log.info("cleaned %d captions for domain %s", len(cleaned), domain)
    return 0


def cmd_personalize(args) -> int:
    from ..backbone import load_backbone
    from ..domain import dreambooth_config, textual_inversion_config, train_dreambooth, train_textual_inversion
    from ..domain.personalization import load_ti_templates

    cfg = _config(args)
    m = cfg.modifier
    if not m.domain:
        raise UsageError("personalize needs modifier.domain")
    if not m.image_set:
        raise UsageError("personalize needs modifier.image_set (a directory of target-domain images)")
    images = sorted(p for p in Path(m.image_set).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not images:
        raise UsageError(f"no images in {m.image_set}")
    overrides = {k: v for k, v in (("steps", args.steps if args.steps is not None else m.steps),
                                   ("learning_rate", m.learning_rate)) if v is not None}
    overrides.update(image_set=[str(p) for p in images], seed=cfg.seed, resolution=cfg.dataset.image_size)
    backbone = load_backbone(cfg.backbone.spec)
    # a stub backbone is only trained on when the config asks for it explicitly
    allow_stub = cfg.backbone.spec.startswith("stub")
    out = cfg.run_dir / "personalize"
    out.mkdir(parents=True, exist_ok=True)
    from ..domain import domain_presets

    init_word = domain_presets().get(m.domain, {}).get("init_word", "painting")
    if args.method == "ti":
        pcfg = textual_inversion_config(init_word=init_word, templates=load_ti_templates(), **overrides)
        learned = train_textual_inversion(None, backbone, pcfg, allow_stub=allow_stub)
        path = out / token_filename(m.domain)
        learned.save(path)
        log.info("token %s saved to %s; set modifier.token_file to use it", learned.token, path)
    else:
        pcfg = dreambooth_config(init_word=init_word, **overrides)
        _, path = train_dreambooth(None, backbone, out / f"{m.domain}_db", pcfg, domain=m.domain, allow_stub=allow_stub)
        log.info("DreamBooth weights saved to %s; set modifier.checkpoint to use them", path)
    return 0


def cmd_train(args) -> int:
    from ..engine.trainer import train

    cfg = _config(args)
    result = train(cfg)
    log.info("run %s: loss %.4f -> %.4f; %s", result.run_dir, result.initial_loss, result.final_loss,
             json.dumps(result.report.metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from ..engine.trainer import evaluate, load_experiment

    cfg = _config(args)
    exp = load_experiment(cfg)
    report = evaluate(exp, args.split, multi_scale=args.multi_scale or None)
    split = args.split or cfg.dataset.eval_split
    out = cfg.run_dir / f"eval_{split}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    log.info("wrote %s: %s", out, json.dumps(report.metrics, sort_keys=True))
    return 0


def _tokens(text: str) -> list[str]:
    toks = [t.strip() for t in text.split(",") if t.strip()]
    if not toks:
        raise UsageError("--tokens is empty")
    return toks


def _analysis_dir(cfg) -> Path:
    out = cfg.run_dir / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_sample(dataset, image_id):
    if image_id not in dataset.ids():
        raise UsageError(f"image {image_id!r} is not in split {dataset.split!r}")
    return dataset.load(image_id)


def _prompt_with_tokens(caption: str, tokens: list[str]) -> str:
    """``caption`` with every token missing from it appended, so each token gets a map."""
    words = set(caption.lower().replace(",", " ").split())
    extra = [t for t in tokens if t.lower() not in words]
    return " ".join([caption.strip(), *extra]).strip()


def cmd_analyze_attention(args) -> int:
    from ..backbone import load_backbone
    from ..engine.analysis import save_attention_maps
    from ..engine.trainer import prepare_backbone
    from ..prompting import Strategy, build_from_caption, build_oracle, class_names_string

    cfg = _config(args)
    dataset = open_dataset(cfg.dataset, cfg.dataset.eval_split)
    sample = _load_sample(dataset, args.image)
    tokens = _tokens(args.tokens)
    backbone = prepare_backbone(cfg, load_backbone(cfg.backbone.spec))
    if args.caption:
        caption = args.caption
    elif sample.mask is not None:
        caption = build_oracle(sample.mask.numpy(), dataset.class_names, dataset.ignore_index)
    else:
        labels = sorted(set(sample.labels.tolist())) if sample.labels is not None else []
        caption = class_names_string([dataset.class_names[i] for i in labels])
    text = _prompt_with_tokens(caption, tokens)
    cond = build_from_caption(text, backbone.text_encoder, Strategy.Caption)
    try:
        paths = save_attention_maps(sample.image, args.image, cond, tokens, backbone,
                                    _analysis_dir(cfg) / "attention", args.resolution)
    except KeyError as exc:
        raise UsageError(f"token not found in prompt {text!r}: {exc}") from None
    log.info("prompt %r: wrote %d maps", text, len(paths))
    return 0


def _seg_run(cfg):
    from ..engine.trainer import load_experiment

    if cfg.task != "segmentation":
        raise UsageError("this analysis needs a segmentation run")
    exp = load_experiment(cfg)
    return exp, open_dataset(cfg.dataset, cfg.dataset.eval_split)


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["empty"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def _write_summary(path: Path, corr) -> None:
    data = {"r": corr.r, "undefined": corr.undefined, "n": len(corr.rows), "missing": corr.missing}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@torch.no_grad()
def _predictions(exp, dataset):
    from ..engine.trainer import predict_logits

    out = []
    for image_id in dataset.ids():
        s = dataset.load(image_id)
        pred = predict_logits(exp, s.image.unsqueeze(0), exp.provider(s)).argmax(1)[0]
        out.append((s, pred))
    return out


def cmd_analyze_recall(args) -> int:
    from ..engine.analysis import caption_recall_analysis, text_encoder_embedder
    from ..engine.metrics import ConfusionMatrix

    cfg = _config(args)
    path = _caption_cache_path(cfg)
    if not path.exists():
        raise UsageError(f"caption cache {path} does not exist; run `tadp caption` first")
    exp, dataset = _seg_run(cfg)
    captions = {r.image_id: (r.cleaned or r.caption) for r in CaptionCache(path) if r.min_tokens == cfg.builder.min_tokens}
    names = dataset.class_names
    present, per_image = {}, {}
    for s, pred in _predictions(exp, dataset):
        cm = ConfusionMatrix(len(names), dataset.ignore_index)
        cm.update(pred, s.mask)
        per_image[s.image_id] = cm.miou()
        idx = np.unique(s.mask.numpy())
        # captions never name the background, so it does not count against recall
        present[s.image_id] = [names[i] for i in idx if i != dataset.ignore_index and names[i] != "background"]
    corr = caption_recall_analysis(captions, present, per_image, text_encoder_embedder(exp.backbone.text_encoder))
    out = _analysis_dir(cfg)
    _write_rows(out / "recall.csv", corr.rows)
    _write_summary(out / "recall.json", corr)
    log.info("recall vs mIoU: r=%s over %d images", corr.r, len(corr.rows))
    return 0


def cmd_analyze_size(args) -> int:
    from ..engine.analysis import object_size_analysis

    cfg = _config(args)
    exp, dataset = _seg_run(cfg)
    pairs = _predictions(exp, dataset)
    corr = object_size_analysis([p for _, p in pairs], [s.mask for s, _ in pairs], dataset.ignore_index)
    out = _analysis_dir(cfg)
    _write_rows(out / "object_size.csv", corr.rows)
    _write_summary(out / "object_size.json", corr)
    log.info("object size vs IoU: r=%s over %d objects", corr.r, len(corr.rows))
    return 0


def cmd_analyze_confusion(args) -> int:
    from ..engine.analysis import pixel_confusion, present_vs_all_conditioning
    from ..engine.trainer import predict_logits
    from .plots import write_matrix_csv

    cfg = _config(args)
    exp, dataset = _seg_run(cfg)
    present, every = present_vs_all_conditioning(exp.backbone.text_encoder, exp.provider.vocab, exp.provider.n_tokens)
    samples = [dataset.load(i) for i in dataset.ids()]
    a, b = pixel_confusion(lambda x, c: predict_logits(exp, x, c), present, every, samples,
                           len(dataset.class_names), dataset.ignore_index)
    out = _analysis_dir(cfg)
    write_matrix_csv(out / "confusion_present.csv", a, dataset.class_names)
    write_matrix_csv(out / "confusion_all.csv", b, dataset.class_names)
    log.info("wrote confusion matrices to %s", out)
    return 0


def cmd_analyze_copy_paste(args) -> int:
    from ..backbone import load_backbone
    from ..engine.analysis import Patch, copy_paste_probe
    from ..engine.trainer import prepare_backbone
    from ..prompting import Strategy, build_from_caption, build_oracle

    cfg = _config(args)
    dataset = open_dataset(cfg.dataset, cfg.dataset.eval_split)
    base, src = _load_sample(dataset, args.image), _load_sample(dataset, args.source)
    if src.mask is None:
        raise UsageError("copy-paste needs a dataset with masks")
    if args.cls not in dataset.class_names:
        raise UsageError(f"unknown class {args.cls!r}")
    obj = src.mask == dataset.class_names.index(args.cls)
    if not obj.any():
        raise UsageError(f"no {args.cls} in {args.source}")
    ys, xs = torch.nonzero(obj, as_tuple=True)
    y0, y1, x0, x1 = int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1
    h, w = y1 - y0, x1 - x0
    if args.at:
        try:
            top, left = (int(v) for v in args.at.split(","))
        except ValueError:
            raise UsageError("--at must be top,left") from None
    else:
        top, left = (base.image.shape[1] - h) // 2, (base.image.shape[2] - w) // 2
    patch = Patch(args.cls, src.image[:, y0:y1, x0:x1], top, left, obj[y0:y1, x0:x1].float())
    tokens = _tokens(args.tokens)
    backbone = prepare_backbone(cfg, load_backbone(cfg.backbone.spec))
    caption = build_oracle(base.mask.numpy(), dataset.class_names, dataset.ignore_index) if base.mask is not None else ""
    cond = build_from_caption(_prompt_with_tokens(caption, tokens), backbone.text_encoder, Strategy.Caption)
    try:
        maps = copy_paste_probe(base.image, [patch], tokens, backbone, cond,
                                _analysis_dir(cfg) / "copy_paste", args.resolution)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log.info("wrote %d maps", len(maps))
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_comparison, emit_plots

    if args.compare:
        out = Path(args.output or ".")
        paths = emit_comparison(args.compare, args.metric, out)
    else:
        if args.run:
            run = Path(args.run)
        elif args.config:
            run = load_config(args.config, output=args.output).run_dir
        else:
            raise UsageError("plot needs --run, -c/--config or --compare")
        paths = emit_plots(run)
    for p in paths:
        log.info("wrote %s", p)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "caption": cmd_caption,
    "clean": cmd_clean,
    "personalize": cmd_personalize,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot": cmd_plot,
}
ANALYSES = {
    "attention": cmd_analyze_attention,
    "recall": cmd_analyze_recall,
    "size": cmd_analyze_size,
    "confusion": cmd_analyze_confusion,
    "copy-paste": cmd_analyze_copy_paste,
}


def main(argv: list[str] | None = None) -> int:
    from .plots import PlotError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    fn = ANALYSES[args.analysis] if args.command == "analyze" else COMMANDS[args.command]
    try:
        return fn(args)
    except (UsageError, ConfigError, DatasetError, PlotError) as exc:
        log.error("%s", exc)
        return 1
    except (CaptionServiceError, RuntimeError, OSError, KeyError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            log.exception("traceback")
        return 2


if __name__ == "__main__":
    sys.exit(main())
