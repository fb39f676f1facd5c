"""Two-stage detection on the V pyramid through torchvision's RPN and RoI heads."""
from __future__ import annotations

from collections import OrderedDict
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import torch
from torch import nn
from torchvision.models.detection.anchor_utils import AnchorGenerator
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor, TwoMLPHead
from torchvision.models.detection.image_list import ImageList
from torchvision.models.detection.roi_heads import RoIHeads
from torchvision.models.detection.rpn import RegionProposalNetwork, RPNHead
from torchvision.ops import MultiScaleRoIAlign

from .pyramid import FPNNeck


@dataclass
class Detections:
    boxes: torch.Tensor  # (n, 4) xyxy in image pixels
    labels: torch.Tensor  # (n,)
    scores: torch.Tensor  # (n,)

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


@dataclass
class DetectionHeadConfig:
    num_classes: int  # including background at index 0
    fpn_channels: int = 256
    anchor_scale: float = 4.0  # anchor side = anchor_scale * divisor
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_top_n: int = 1000
    post_nms_top_n: int = 1000
    box_detections_per_img: int = 100
    box_score_thresh: float = 0.05
    representation_size: int = 1024


class DetectionHead(nn.Module):
    """FPN neck + RPN + RoI heads; training returns the standard loss dict, eval returns Detections.

    ``post_nms_top_n=0`` is the degenerate configuration that yields no
    proposals and empty predictions.
    """

    task = "Detection"

    def __init__(self, layout: Mapping[int, int], cfg: DetectionHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.neck = FPNNeck(layout, cfg.fpn_channels)
        divisors = self.neck.divisors
        self.names = [str(d) for d in divisors]
        anchors = AnchorGenerator(
            sizes=tuple((int(cfg.anchor_scale * d),) for d in divisors),
            aspect_ratios=(tuple(cfg.aspect_ratios),) * len(divisors),
        )
        top_n = dict(training=cfg.pre_nms_top_n, testing=cfg.pre_nms_top_n)
        post_n = dict(training=cfg.post_nms_top_n, testing=cfg.post_nms_top_n)
        self.rpn = RegionProposalNetwork(
            anchors,
            RPNHead(cfg.fpn_channels, anchors.num_anchors_per_location()[0]),
            fg_iou_thresh=0.7,
            bg_iou_thresh=0.3,
            batch_size_per_image=256,
            positive_fraction=0.5,
            pre_nms_top_n=top_n,
            post_nms_top_n=post_n,
            nms_thresh=0.7,
        )
        pool = MultiScaleRoIAlign(featmap_names=self.names, output_size=7, sampling_ratio=2)
        rep = cfg.representation_size
        self.roi_heads = RoIHeads(
            pool,
            TwoMLPHead(cfg.fpn_channels * 7 * 7, rep),
            FastRCNNPredictor(rep, cfg.num_classes),
            fg_iou_thresh=0.5,
            bg_iou_thresh=0.5,
            batch_size_per_image=512,
            positive_fraction=0.25,
            bbox_reg_weights=None,
            score_thresh=cfg.box_score_thresh,
            nms_thresh=0.5,
            detections_per_img=cfg.box_detections_per_img,
        )

    @property
    def layout(self) -> dict[int, int]:
        return dict(self.neck.layout)

    def forward(self, v, image_size: tuple[int, int], targets: Sequence[dict] | None = None):
        """``targets``: per image {"boxes": (n, 4) xyxy, "labels": (n,) int64}; needed in training."""
        levels = self.neck(v)
        feats = OrderedDict((str(d), x) for d, x in levels.items())
        first = next(iter(feats.values()))
        B = first.shape[0]
        H, W = image_size
        # the anchor generator only reads shape, dtype and device from the image tensor
        images = ImageList(first.new_empty(B, 0, H, W), [(H, W)] * B)
        if self.training and targets is None:
            raise ValueError("targets are required in training mode")
        proposals, rpn_losses = self.rpn(images, feats, targets)
        dets, roi_losses = self.roi_heads(feats, proposals, images.image_sizes, targets)
        if self.training:
            return {**rpn_losses, **roi_losses}
        return [Detections(d["boxes"], d["labels"], d["scores"]) for d in dets]


def detection_loss(losses: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Sum of the RPN and RoI head terms."""
    return sum(losses.values())
