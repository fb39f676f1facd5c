"""Dataset adapters over standard on-disk layouts. Nothing is ever downloaded."""
from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..prompting.types import ClassVocabulary

IGNORE_INDEX = 255


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image_id: str
    image: torch.Tensor  # (3, H, W) in [-1, 1]
    mask: torch.Tensor | None = None  # (H, W) int64 class indices, IGNORE_INDEX = unlabeled
    depth: torch.Tensor | None = None  # (H, W) metres, 0 = invalid
    boxes: torch.Tensor | None = None  # (n, 4) xyxy pixels
    labels: torch.Tensor | None = None  # (n,) int64, 1-based (0 is background)
    meta: dict = field(default_factory=dict)


def _fit(img: Image.Image, size: int, resample) -> tuple[Image.Image, float, tuple[int, int]]:
    """Resize the shorter side to ``size`` and center-crop to size x size."""
    w, h = img.size
    scale = size / min(w, h)
    nw, nh = max(size, round(w * scale)), max(size, round(h * scale))
    img = img.resize((nw, nh), resample)
    left, top = (nw - size) // 2, (nh - size) // 2
    return img.crop((left, top, left + size, top + size)), scale, (left, top)


def image_to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def tensor_to_image(x: torch.Tensor) -> Image.Image:
    arr = ((x.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    return Image.fromarray(arr)


class DatasetAdapter:
    name: str = "dataset"
    task: str = "segmentation"
    ignore_index: int = IGNORE_INDEX

    def __init__(self, root: str | Path, split: str, image_size: int, limit: int | None = None):
        self.root = Path(root)
        if not self.root.exists():
            raise DatasetError(f"{self.name} root {self.root} does not exist")
        self.split = split
        self.image_size = image_size
        self._ids = self._list_ids()
        if limit is not None:
            self._ids = self._ids[:limit]
        if not self._ids:
            raise DatasetError(f"no images for split {split!r} under {self.root}")

    # subclasses implement these
    def _list_ids(self) -> list[str]:
        raise NotImplementedError

    def _image_path(self, image_id: str) -> Path:
        raise NotImplementedError

    def _annotate(self, sample: Sample, scale: float, offset: tuple[int, int]) -> None:
        pass

    @property
    def class_names(self) -> list[str]:
        raise NotImplementedError

    @property
    def vocabulary(self) -> ClassVocabulary:
        return ClassVocabulary(self.class_names)

    def ids(self) -> list[str]:
        return list(self._ids)

    def __len__(self) -> int:
        return len(self._ids)

    def image(self, image_id: str) -> Image.Image:
        """The raw image, as handed to captioners."""
        with Image.open(self._image_path(image_id)) as im:
            return im.convert("RGB")

    def load(self, image_id: str) -> Sample:
        img, scale, offset = _fit(self.image(image_id), self.image_size, Image.Resampling.BILINEAR)
        sample = Sample(image_id, image_to_tensor(img))
        self._annotate(sample, scale, offset)
        return sample

    def _read_mask(self, path: Path, remap=None) -> torch.Tensor:
        with Image.open(path) as m:
            m, _, _ = _fit(m, self.image_size, Image.Resampling.NEAREST)
            arr = np.array(m, dtype=np.int64)
        if remap is not None:
            arr = remap(arr)
        return torch.from_numpy(arr)


class SyntheticDataset(DatasetAdapter):
    """Reads the layout written by ``synth_dataset``."""

    name = "synthetic"

    def __init__(self, root, split="train", image_size=None, limit=None):
        self.manifest = json.loads((Path(root) / "manifest.json").read_text(encoding="utf-8"))
        self.task = {"seg": "segmentation", "depth": "depth", "det": "detection"}[self.manifest["kind"]]
        self._classes = (Path(root) / "classes.txt").read_text(encoding="utf-8").split("\n")[:-1]
        self._ann = json.loads((Path(root) / "annotations.json").read_text(encoding="utf-8"))
        super().__init__(root, split, image_size or self.manifest["size"], limit)

    def _list_ids(self):
        path = self.root / "splits" / f"{self.split}.txt"
        if not path.exists():
            raise DatasetError(f"no split file {path}")
        return [line for line in path.read_text(encoding="utf-8").splitlines() if line]

    def _image_path(self, image_id):
        return self.root / "images" / f"{image_id}.png"

    @property
    def class_names(self):
        return list(self._classes)

    def _annotate(self, sample, scale, offset):
        i = sample.image_id
        sample.mask = self._read_mask(self.root / "masks" / f"{i}.png")
        ann = self._ann[i]
        boxes = torch.tensor(ann["boxes"], dtype=torch.float32).reshape(-1, 4)
        boxes = boxes * scale - torch.tensor([offset[0], offset[1], offset[0], offset[1]], dtype=torch.float32)
        sample.boxes = boxes.clamp(0, self.image_size)
        sample.labels = torch.tensor(ann["labels"], dtype=torch.int64)
        sample.meta = {"room_type": ann.get("room_type")}
        depth_path = self.root / "depth" / f"{i}.png"
        if depth_path.exists():
            sample.depth = self._read_mask(depth_path).float() / 1000.0


class VOCSegmentation(DatasetAdapter):
    """VOCdevkit/VOC2012 layout: JPEGImages, SegmentationClass, ImageSets/Segmentation."""

    name = "voc"

    def _list_ids(self):
        path = self.root / "ImageSets" / "Segmentation" / f"{self.split}.txt"
        if not path.exists():
            raise DatasetError(f"missing split file {path}")
        return path.read_text().split()

    def _image_path(self, image_id):
        return self.root / "JPEGImages" / f"{image_id}.jpg"

    @property
    def class_names(self):
        return list(ClassVocabulary.builtin("pascal").names)

    def _annotate(self, sample, scale, offset):
        sample.mask = self._read_mask(self.root / "SegmentationClass" / f"{sample.image_id}.png")


# annotation-file spellings of the readable class names
VOC_XML_NAMES = {
    "aeroplane": "airplane",
    "diningtable": "dining table",
    "motorbike": "motorcycle",
    "pottedplant": "potted plant",
    "tvmonitor": "television",
}


class VOCDetection(DatasetAdapter):
    """VOC detection layout (Annotations/*.xml); also used for Watercolor2k and Comic2k."""

    name = "voc_det"
    task = "detection"
    classes: list[str] | None = None

    def _list_ids(self):
        path = self.root / "ImageSets" / "Main" / f"{self.split}.txt"
        if not path.exists():
            raise DatasetError(f"missing split file {path}")
        return path.read_text().split()

    def _image_path(self, image_id):
        return self.root / "JPEGImages" / f"{image_id}.jpg"

    @property
    def class_names(self):
        names = self.classes or list(ClassVocabulary.builtin("pascal").names)[1:]
        return ["background", *names]

    def _annotate(self, sample, scale, offset):
        tree = ET.parse(self.root / "Annotations" / f"{sample.image_id}.xml")
        names = self.class_names
        boxes, labels = [], []
        for obj in tree.iter("object"):
            cls = obj.findtext("name", "").strip()
            cls = VOC_XML_NAMES.get(cls, cls)
            if cls not in names or obj.findtext("difficult", "0") == "1":
                continue
            bb = obj.find("bndbox")
            x0, y0, x1, y1 = (float(bb.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax"))
            boxes.append([x0 - 1, y0 - 1, x1, y1])
            labels.append(names.index(cls))
        b = torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4) * scale
        b -= torch.tensor([offset[0], offset[1], offset[0], offset[1]], dtype=torch.float32)
        b = b.clamp(0, self.image_size)
        keep = (b[:, 2] > b[:, 0]) & (b[:, 3] > b[:, 1])
        sample.boxes, sample.labels = b[keep], torch.tensor(labels, dtype=torch.int64)[keep]


class Watercolor2k(VOCDetection):
    name = "watercolor"
    classes = ["bicycle", "bird", "car", "cat", "dog", "person"]


class Comic2k(Watercolor2k):
    name = "comic"


class ADE20K(DatasetAdapter):
    """ADEChallengeData2016 layout; label 0 (other) becomes ignore and classes shift down by one."""

    name = "ade20k"

    def _list_ids(self):
        return sorted(p.stem for p in (self.root / "images" / self.split).glob("*.jpg"))

    def _image_path(self, image_id):
        return self.root / "images" / self.split / f"{image_id}.jpg"

    @property
    def class_names(self):
        return list(ClassVocabulary.builtin("ade20k").names)

    def _annotate(self, sample, scale, offset):
        def reduce_zero(a):
            return np.where(a == 0, IGNORE_INDEX, a - 1)

        sample.mask = self._read_mask(self.root / "annotations" / self.split / f"{sample.image_id}.png", reduce_zero)


class Cityscapes(DatasetAdapter):
    """leftImg8bit / gtFine *_labelTrainIds.png layout."""

    name = "cityscapes"
    image_glob = "leftImg8bit/{split}/*/*_leftImg8bit.png"
    image_suffix = "_leftImg8bit"

    def _list_ids(self):
        paths = sorted(self.root.glob(self.image_glob.format(split=self.split)))
        self._paths = {self._id(p): p for p in paths}
        return list(self._paths)

    def _id(self, p: Path) -> str:
        return f"{p.parent.name}/{p.name[: -len(self.image_suffix + '.png')]}"

    def _image_path(self, image_id):
        return self._paths[image_id]

    def _label_path(self, image_id) -> Path:
        city, stem = image_id.split("/")
        return self.root / "gtFine" / self.split / city / f"{stem}_gtFine_labelTrainIds.png"

    @property
    def class_names(self):
        return list(ClassVocabulary.builtin("cityscapes").names)

    def _annotate(self, sample, scale, offset):
        path = self._label_path(sample.image_id)
        if path.exists():
            sample.mask = self._read_mask(path)


class DarkZurich(Cityscapes):
    """rgb_anon/{split}/night/*/*_rgb_anon.png with gt/{split}/night/*/*_gt_labelTrainIds.png."""

    name = "dark_zurich"
    image_glob = "rgb_anon/{split}/night/*/*_rgb_anon.png"
    image_suffix = "_rgb_anon"

    def _label_path(self, image_id):
        seq, stem = image_id.split("/")
        return self.root / "gt" / self.split / "night" / seq / f"{stem}_gt_labelTrainIds.png"


class NYUv2(DatasetAdapter):
    """Split file ``{split}.txt`` of ``rgb_path depth_path`` pairs; depth PNGs in millimetres.

    The room type is the scene directory name without its numeric suffix
    (``bedroom_0001/rgb_00001.jpg`` -> ``bedroom``).
    """

    name = "nyu"
    task = "depth"

    def _list_ids(self):
        path = self.root / f"{self.split}.txt"
        if not path.exists():
            raise DatasetError(f"missing split file {path}")
        self._pairs = {}
        for line in path.read_text().splitlines():
            if line.strip():
                rgb, depth = line.split()[:2]
                self._pairs[rgb.lstrip("/")] = depth.lstrip("/")
        return list(self._pairs)

    def _image_path(self, image_id):
        return self.root / image_id

    @property
    def class_names(self):
        return ["room"]

    def _annotate(self, sample, scale, offset):
        sample.depth = self._read_mask(self.root / self._pairs[sample.image_id]).float() / 1000.0
        scene = Path(sample.image_id).parent.name
        sample.meta = {"room_type": scene.rstrip("0123456789").rstrip("_").replace("_", " ") or None}


ADAPTERS = {
    "synthetic": SyntheticDataset,
    "voc": VOCSegmentation,
    "voc_det": VOCDetection,
    "watercolor": Watercolor2k,
    "comic": Comic2k,
    "ade20k": ADE20K,
    "cityscapes": Cityscapes,
    "dark_zurich": DarkZurich,
    "nyu": NYUv2,
}


def open_dataset(spec, split: str | None = None) -> DatasetAdapter:
    """Open ``spec`` (a DatasetSpec) at ``split`` (defaults to ``spec.split``)."""
    try:
        cls = ADAPTERS[spec.name]
    except KeyError:
        raise DatasetError(f"unknown dataset {spec.name!r}; known: {sorted(ADAPTERS)}") from None
    return cls(spec.root, split or spec.split, spec.image_size, spec.limit)
