"""Deterministic scenes of coloured shapes with exact masks, depth and boxes."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..domain import domain_presets

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross", "bar", "ellipse")
# base colour per shape class, jittered per instance
PALETTE = np.array(
    [
        [220, 60, 50],
        [60, 120, 230],
        [240, 200, 40],
        [60, 190, 90],
        [200, 80, 200],
        [240, 140, 40],
        [60, 210, 210],
        [150, 100, 60],
    ],
    dtype=np.float64,
)
ROOM_TYPES = ("bedroom", "kitchen", "office", "living room", "bathroom")
KINDS = ("seg", "depth", "det")


def _shape_mask(shape: str, yy, xx, cy, cx, r) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy**2 + dx**2 <= r**2
    if shape == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if shape == "triangle":
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if shape == "ring":
        d2 = dy**2 + dx**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)) | ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r))
    if shape == "bar":
        return (np.abs(dy) <= r * 0.35) & (np.abs(dx) <= r)
    if shape == "ellipse":
        return (dy / (0.55 * r)) ** 2 + (dx / r) ** 2 <= 1
    raise ValueError(shape)


def class_names(n_classes: int) -> list[str]:
    if not 2 <= n_classes <= len(SHAPES) + 1:
        raise ValueError(f"n_classes must be in [2, {len(SHAPES) + 1}] (background included)")
    return ["background", *SHAPES[: n_classes - 1]]


def _caption(names: list[str], present: list[int]) -> str:
    objs = [f"a {names[c]}" for c in present]
    if len(objs) == 1:
        return f"a picture of {objs[0]}"
    return "a picture of " + ", ".join(objs[:-1]) + f" and {objs[-1]}"


def render_scene(rng: np.random.Generator, size: int, n_classes: int, kind: str, max_shapes: int = 3) -> dict:
    """One scene: image (H, W, 3) uint8, mask, per-instance boxes/labels and optional depth (metres)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    base = rng.uniform(20, 60, size=3)
    grad = rng.uniform(-20, 20, size=3)
    image = base + grad * (yy / size)[..., None]
    image = image + rng.normal(0, 3, size=(size, size, 3))
    mask = np.zeros((size, size), dtype=np.uint8)
    inst = np.zeros((size, size), dtype=np.int32)
    depth = None
    far, near = 8.0, 1.0
    if kind == "depth":
        top, bottom = rng.uniform(6.0, far), rng.uniform(2.0, 4.0)
        depth = top + (bottom - top) * (yy / size)

    n = int(rng.integers(1, max_shapes + 1))
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(1, n_classes))
        r = rng.uniform(size / 8, size / 4)
        cy, cx = rng.uniform(r, size - r, size=2)
        d = rng.uniform(near, 5.0)
        shapes.append((d, cls, cy, cx, r))
    # paint far to near so nearer shapes occlude
    shapes.sort(key=lambda s: -s[0])
    labels = []
    for k, (d, cls, cy, cx, r) in enumerate(shapes, start=1):
        m = _shape_mask(SHAPES[cls - 1], yy, xx, cy, cx, r)
        colour = np.clip(PALETTE[cls - 1] + rng.normal(0, 12, size=3), 0, 255)
        shade = 1.0 - 0.25 * ((yy - cy) / (2 * r) + 0.5)
        image[m] = (colour * shade[..., None])[m]
        mask[m] = cls
        inst[m] = k
        labels.append(cls)
        if depth is not None:
            depth[m] = d

    boxes, box_labels = [], []
    for k, cls in enumerate(labels, start=1):
        ys, xs = np.nonzero(inst == k)
        if ys.size < 4:
            continue
        boxes.append([int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1])
        box_labels.append(cls)
    return {
        "image": np.clip(image, 0, 255).round().astype(np.uint8),
        "mask": mask,
        "instances": inst,
        "boxes": boxes,
        "labels": box_labels,
        "depth": depth,
    }


def synth_dataset(
    out_dir: str | Path,
    kind: str = "seg",
    n_images: int = 16,
    n_classes: int = 3,
    seed: int = 0,
    size: int = 64,
    n_val: int = 0,
) -> Path:
    """Write a synthetic dataset; byte-identical for identical arguments.

    Layout: images/, masks/, depth/ (depth kind, uint16 millimetres),
    annotations.json (boxes are the bounding boxes of each instance's visible
    pixels), classes.txt, splits/{train,val}.txt, fixtures/ for the offline
    caption clients and manifest.json. With ``n_val=0`` the val split
    repeats the train split.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if n_images < 1 or n_val < 0:
        raise ValueError("n_images must be >= 1 and n_val >= 0")
    if size % 8:
        raise ValueError("size must be a multiple of 8")
    names = class_names(n_classes)
    out = Path(out_dir)
    for sub in ("images", "masks", "splits", "fixtures") + (("depth",) if kind == "depth" else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = [f"synth_{i:04d}" for i in range(n_images + n_val)]
    annotations, captions = {}, {}
    for image_id in ids:
        scene = render_scene(rng, size, n_classes, kind)
        Image.fromarray(scene["image"]).save(out / "images" / f"{image_id}.png")
        Image.fromarray(scene["mask"]).save(out / "masks" / f"{image_id}.png")
        if scene["depth"] is not None:
            mm = np.clip(np.round(scene["depth"] * 1000), 0, 65535).astype(np.uint16)
            Image.fromarray(mm).save(out / "depth" / f"{image_id}.png")
        ann = {"boxes": scene["boxes"], "labels": scene["labels"]}
        if kind == "depth":
            ann["room_type"] = ROOM_TYPES[int(rng.integers(len(ROOM_TYPES)))]
        annotations[image_id] = ann
        present = sorted(set(np.unique(scene["mask"]).tolist()) - {0})
        captions[image_id] = _caption(names, present)

    train, val = ids[:n_images], ids[n_images:] or ids[:n_images]
    (out / "splits" / "train.txt").write_text("".join(f"{i}\n" for i in train), encoding="utf-8")
    (out / "splits" / "val.txt").write_text("".join(f"{i}\n" for i in val), encoding="utf-8")
    (out / "classes.txt").write_text("".join(f"{n}\n" for n in names), encoding="utf-8")
    _dump(out / "annotations.json", annotations)
    _dump(out / "fixtures" / "captioner.json", captions)
    # cleaning is the identity: synthetic captions never mention a style
    _dump(out / "fixtures" / "cleaner.json", {d: {c: c for c in captions.values()} for d in domain_presets()})
    manifest = {"kind": kind, "n_images": n_images, "n_val": n_val, "n_classes": n_classes, "seed": seed, "size": size}
    _dump(out / "manifest.json", manifest)
    return out


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
