"""Post-hoc analyses: caption recall, object size, pixel confusion and attention maps."""
from __future__ import annotations

import logging
import re
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..backbone import aggregate_attention, encode_and_scale, extract_features
from ..prompting import ConditioningMatrix, Strategy, build_class_names, build_from_caption, build_oracle
from .metrics import IGNORE_INDEX, _np

log = logging.getLogger(__name__)

Embedder = Callable[[Sequence[str]], np.ndarray]

_WORD_RE = re.compile(r"[A-Za-z0-9]+(?:['-][A-Za-z]+)*")


@dataclass
class Correlation:
    rows: list[dict]
    r: float | None
    undefined: bool = False
    missing: list[str] = field(default_factory=list)


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Pearson r, or None when undefined (fewer than two points or zero variance)."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n == 0, 1, n)


def recalled_classes(caption: str, classes: Sequence[str], embedder: Embedder, threshold: float = 0.9) -> list[str]:
    """Classes whose name embedding has cosine >= threshold with some caption n-gram.

    n-grams up to the longest class name (in words) let multi-word names
    such as "dining table" match verbatim.
    """
    words = _WORD_RE.findall(caption.lower())
    if not words or not classes:
        return []
    longest = max(len(c.split()) for c in classes)
    grams = sorted({" ".join(words[i : i + n]) for n in range(1, longest + 1) for i in range(len(words) - n + 1)})
    g = _unit(np.asarray(embedder(grams), np.float64))
    c = _unit(np.asarray(embedder(list(classes)), np.float64))
    sim = c @ g.T
    return [name for name, row in zip(classes, sim) if row.max() >= threshold - 1e-9]


def caption_recall_analysis(
    captions: Mapping[str, str],
    present: Mapping[str, Sequence[str]],
    miou_per_image: Mapping[str, float],
    embedder: Embedder,
    threshold: float = 0.9,
) -> Correlation:
    """Per-image caption recall of the present classes against per-image mIoU."""
    rows, missing = [], []
    for image_id in sorted(present):
        if image_id not in captions:
            missing.append(image_id)
            continue
        classes = list(present[image_id])
        if not classes or image_id not in miou_per_image:
            continue
        hit = recalled_classes(captions[image_id], classes, embedder, threshold)
        rows.append({"image_id": image_id, "recall": len(hit) / len(classes), "mIoU": float(miou_per_image[image_id])})
    if missing:
        log.warning("%d images have no caption: %s", len(missing), ", ".join(missing[:10]))
    r = pearson([x["recall"] for x in rows], [x["mIoU"] for x in rows])
    return Correlation(rows, r, r is None, missing)


def text_encoder_embedder(text_encoder) -> Embedder:
    """First-EOS embeddings of the strings under ``text_encoder``."""
    from ..backbone.text import encode_texts

    @torch.no_grad()
    def embed(texts: Sequence[str]) -> np.ndarray:
        enc = encode_texts(text_encoder, list(texts))
        idx = torch.tensor([n - 1 for n in enc.lengths])
        return enc.embeddings[torch.arange(len(texts)), idx].cpu().numpy()

    return embed


def object_size_analysis(preds, gts, ignore_index: int = IGNORE_INDEX) -> Correlation:
    """One row per (image, gt class) region: relative size and IoU.

    Relative size is region pixels over all pixels of the image.
    """
    rows = []
    for k, (p, g) in enumerate(zip(preds, gts)):
        p, g = _np(p), _np(g)
        if p.shape != g.shape:
            raise ValueError(f"image {k}: pred {p.shape} and gt {g.shape} differ")
        valid = g != ignore_index
        for c in np.unique(g[valid]):
            gm = (g == c) & valid
            pm = (p == c) & valid
            inter = np.sum(gm & pm)
            union = np.sum(gm | pm)
            rows.append({"image": k, "class": int(c), "relative_size": float(gm.sum() / g.size), "IoU": float(inter / union)})
    r = pearson([x["relative_size"] for x in rows], [x["IoU"] for x in rows])
    return Correlation(rows, r, r is None)


def confusion_scores(probs: torch.Tensor, gt: torch.Tensor, num_classes: int, ignore_index: int = IGNORE_INDEX):
    """(sum, count) accumulators: sum[g] = summed softmax vectors over pixels of gt class g."""
    p = probs.permute(1, 0, *range(2, probs.ndim)).reshape(num_classes, -1).T.double()
    g = gt.reshape(-1)
    keep = g != ignore_index
    p, g = p[keep], g[keep].long()
    sums = torch.zeros(num_classes, num_classes, dtype=torch.float64).index_add_(0, g, p)
    counts = torch.bincount(g, minlength=num_classes).double()
    return sums, counts


def pixel_confusion(
    predict: Callable[[torch.Tensor, ConditioningMatrix], torch.Tensor],
    conditioning_a: Callable,
    conditioning_b: Callable,
    samples,
    num_classes: int,
    ignore_index: int = IGNORE_INDEX,
) -> tuple[np.ndarray, np.ndarray]:
    """Row g, column k: mean softmax score of class k over pixels whose gt is g.

    ``predict(image, conditioning)`` returns (1, K, H, W) logits;
    ``conditioning_a/b(sample)`` return the two conditionings to compare.
    Rows of classes absent from the data are NaN.
    """
    out = []
    for cond_fn in (conditioning_a, conditioning_b):
        sums = torch.zeros(num_classes, num_classes, dtype=torch.float64)
        counts = torch.zeros(num_classes, dtype=torch.float64)
        with torch.no_grad():
            for s in samples:
                probs = predict(s.image.unsqueeze(0), cond_fn(s)).softmax(1)
                ds, dc = confusion_scores(probs, s.mask.unsqueeze(0), num_classes, ignore_index)
                sums += ds
                counts += dc
        mat = (sums / counts.clamp(min=1).unsqueeze(1)).numpy()
        mat[counts.numpy() == 0] = np.nan
        out.append(mat)
    return out[0], out[1]


def present_vs_all_conditioning(text_encoder, vocab, pad_to: int | None = None):
    """The two conditionings compared by the confusion analysis: present class names vs all names."""
    pad_to = pad_to or text_encoder.max_tokens
    all_names = build_class_names(vocab, text_encoder, pad_to=pad_to)

    def present(sample):
        text = build_oracle(sample.mask.numpy(), vocab.names)
        return build_from_caption(text, text_encoder, Strategy.Oracle, pad_to=pad_to, allow_empty=True)

    return present, lambda sample: all_names


# attention maps


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_-]+", "_", text).strip("_") or "tok"


def token_maps(image: torch.Tensor, conditioning: ConditioningMatrix, backbone, resolution: int = 64) -> torch.Tensor:
    """(N, R, R) aggregated attention of every conditioning token."""
    with torch.no_grad():
        latent = encode_and_scale(image.unsqueeze(0) if image.ndim == 3 else image, backbone)
        bundle = extract_features(latent, conditioning, backbone)
        return aggregate_attention(bundle, resolution)[0]


def save_map_png(path: Path, amap: np.ndarray, title: str | None = None, image: np.ndarray | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(3, 3), dpi=80)
    if image is not None:
        ax.imshow(image, extent=(0, 1, 1, 0))
        ax.imshow(amap, cmap="jet", alpha=0.5, extent=(0, 1, 1, 0))
    else:
        ax.imshow(amap, cmap="viridis")
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def save_attention_maps(
    image: torch.Tensor,
    image_id: str,
    conditioning: ConditioningMatrix,
    tokens: Sequence[str],
    backbone,
    out_dir: str | Path,
    resolution: int = 64,
) -> list[Path]:
    """One PNG per requested token: ``attn_{image_id}_{token_index}_{token_text}.png``."""
    maps = token_maps(image, conditioning, backbone, resolution)
    shown = ((image.detach().cpu().permute(1, 2, 0) + 1) / 2).clamp(0, 1).numpy()
    paths = []
    for tok in tokens:
        idx = conditioning.token_index(tok)
        name = f"attn_{_slug(image_id)}_{idx}_{_slug(tok)}.png"
        paths.append(save_map_png(Path(out_dir) / name, maps[idx].cpu().numpy(), tok, shown))
    return paths


@dataclass
class Patch:
    name: str
    pixels: torch.Tensor  # (3, h, w) in [-1, 1]
    top: int
    left: int
    alpha: torch.Tensor | None = None  # (h, w) in [0, 1]


def paste(base: torch.Tensor, patch: Patch) -> torch.Tensor:
    """Composite ``patch`` onto ``base``; parts outside the image are clipped."""
    _, H, W = base.shape
    _, h, w = patch.pixels.shape
    y0, x0 = patch.top, patch.left
    if y0 >= H or x0 >= W or y0 + h <= 0 or x0 + w <= 0:
        raise ValueError(f"patch {patch.name!r} lies entirely outside the {H}x{W} image")
    ys, xs = max(y0, 0), max(x0, 0)
    ye, xe = min(y0 + h, H), min(x0 + w, W)
    region = patch.pixels[:, ys - y0 : ye - y0, xs - x0 : xe - x0]
    alpha = torch.ones(h, w) if patch.alpha is None else patch.alpha
    a = alpha[ys - y0 : ye - y0, xs - x0 : xe - x0].to(base)
    out = base.clone()
    out[:, ys:ye, xs:xe] = a * region + (1 - a) * out[:, ys:ye, xs:xe]
    return out


def copy_paste_probe(
    base_image: torch.Tensor,
    patches: Sequence[Patch],
    tokens: Sequence[str],
    backbone,
    conditioning: ConditioningMatrix,
    out_dir: str | Path | None = None,
    resolution: int = 64,
) -> dict[tuple[str, str], torch.Tensor]:
    """Attention maps per token before and after pasting each patch.

    Keys are (variant, token) where variant is "base" or the patch name;
    there are len(tokens) * (1 + len(patches)) maps.
    """
    variants = [("base", base_image)] + [(p.name, paste(base_image, p)) for p in patches]
    maps = {}
    for vname, img in variants:
        all_maps = token_maps(img, conditioning, backbone, resolution)
        shown = ((img.detach().cpu().permute(1, 2, 0) + 1) / 2).clamp(0, 1).numpy()
        for tok in tokens:
            idx = conditioning.token_index(tok)
            maps[(vname, tok)] = all_maps[idx]
            if out_dir is not None:
                save_map_png(Path(out_dir) / f"paste_{_slug(vname)}_{idx}_{_slug(tok)}.png",
                             all_maps[idx].cpu().numpy(), f"{vname}: {tok}", shown)
    return maps
