import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from torchvision.ops import box_iou

from tadp.backbone import encode_and_scale, extract_features
from tadp.heads import (
    DepthHead,
    DetectionHead,
    DetectionHeadConfig,
    Detections,
    EmptyTargetError,
    LayoutMismatchError,
    SegHead,
    depth_loss,
    detection_loss,
    seg_loss,
)


def random_v(layout, size=64, batch=1, requires_grad=False, seed=0):
    g = torch.Generator().manual_seed(seed)
    return {
        d: torch.randn(batch, c, size // d, size // d, generator=g).requires_grad_(requires_grad)
        for d, c in layout.items()
    }


def test_seg_head_on_stub_bundle(stub):
    lat = encode_and_scale(torch.rand(1, 3, 64, 64) * 2 - 1, stub)
    bundle = extract_features(lat, torch.randn(6, 768), stub)
    head = SegHead(bundle.layout, 3, fpn_channels=16, decoder_channels=16).eval()
    out = head(bundle, out_size=(64, 64))
    assert out.shape == (1, 3, 64, 64) and torch.isfinite(out).all()


def test_output_scales_with_input():
    layout = {8: 8, 16: 12, 32: 4}
    head = SegHead(layout, 3, fpn_channels=16, decoder_channels=16).eval()
    small = head(random_v(layout, 64))
    big = head(random_v(layout, 128))
    assert small.shape[-2:] == (64, 64) and big.shape[-2:] == (128, 128)


@pytest.mark.parametrize("kind", ["seg", "depth"])
def test_gradient_reaches_every_scale(kind):
    layout = {8: 6, 16: 10, 32: 4}
    head = SegHead(layout, 3, 16, 16) if kind == "seg" else DepthHead(layout, 16, 16)
    v = random_v(layout, requires_grad=True)
    head(v).sum().backward()
    for d, x in v.items():
        assert x.grad is not None and x.grad.abs().sum() > 0, f"no gradient at 1/{d}"


def test_layout_mismatch_names_scale():
    head = SegHead({8: 8, 16: 8}, 3, 16, 16)
    with pytest.raises(LayoutMismatchError, match="1/16"):
        head(random_v({8: 8, 16: 9}))
    with pytest.raises(LayoutMismatchError, match="missing"):
        head(random_v({8: 8}))


def test_depth_positive_and_bounded():
    layout = {8: 8, 16: 8}
    head = DepthHead(layout, 16, 16, min_depth=1e-3, max_depth=10.0).eval()
    v = {d: x * 100 for d, x in random_v(layout).items()}
    out = head(v)
    assert out.shape == (1, 1, 64, 64)
    assert (out > 0).all() and (out <= 10.0).all()


def test_heads_deterministic_in_eval():
    layout = {8: 8, 16: 8}
    head = SegHead(layout, 4, 16, 16).eval()
    v = random_v(layout)
    assert torch.equal(head(v), head(v))


def test_seg_loss_uniform_is_ln_k():
    for k in (2, 3, 21, 150):
        logits = torch.zeros(2, k, 4, 4)
        target = torch.randint(0, k, (2, 4, 4))
        assert abs(seg_loss(logits, target).item() - math.log(k)) <= 1e-6


def test_seg_loss_confident_and_ignore():
    target = torch.tensor([[[0, 1], [2, 255]]])
    logits = F.one_hot(target.clamp(max=2), 3).permute(0, 3, 1, 2).float() * 50
    assert seg_loss(logits, target).item() < 1e-12
    with pytest.raises(EmptyTargetError):
        seg_loss(logits, torch.full_like(target, 255))


def test_seg_loss_hand_computed_2x2():
    # pixel logits and targets; the ignored pixel is excluded from the mean
    logits = torch.tensor([[[[2.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [1.0, 3.0]]]])
    target = torch.tensor([[[0, 1], [0, 255]]])
    expected = (
        -math.log(math.exp(2) / (math.exp(2) + 1))
        - math.log(math.e / (1 + math.e))
        - math.log(0.5)
    ) / 3
    assert abs(seg_loss(logits, target).item() - expected) <= 1e-6


def test_depth_loss_zero_cases():
    gt = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 5 + 0.1
    assert abs(depth_loss(gt.clone(), gt).item()) <= 1e-8
    assert abs(depth_loss(gt * 1.7, gt, lam=1.0).item()) <= 1e-8
    assert depth_loss(gt * 1.7, gt).item() > 0


def test_depth_loss_hand_computed_4x4():
    g = torch.Generator().manual_seed(4)
    pred = torch.rand(4, 4, generator=g, dtype=torch.float64) + 0.5
    gt = torch.rand(4, 4, generator=g, dtype=torch.float64) + 0.5
    gt[0, 0] = 0.0  # invalid pixel
    ds = [math.log(p) - math.log(q) for p, q in zip(pred.flatten().tolist(), gt.flatten().tolist()) if q > 0]
    n = len(ds)
    expected = sum(d * d for d in ds) / n - 0.5 * (sum(ds) / n) ** 2
    assert n == 15
    assert abs(depth_loss(pred, gt).item() - expected) <= 1e-12


def test_depth_loss_errors():
    with pytest.raises(EmptyTargetError):
        depth_loss(torch.ones(2, 2), torch.zeros(2, 2))
    with pytest.raises(ValueError):
        depth_loss(torch.ones(2, 2), torch.ones(3, 3))
    valid = torch.tensor([[True, False], [False, False]])
    assert depth_loss(torch.tensor([[2.0, 9.0], [9.0, 9.0]]), torch.ones(2, 2), valid, lam=1.0).item() == 0.0


def test_detection_interface():
    layout = {8: 8, 16: 8}
    head = DetectionHead(layout, DetectionHeadConfig(num_classes=3, fpn_channels=16, representation_size=32))
    target = [{"boxes": torch.tensor([[8.0, 8.0, 40.0, 30.0]]), "labels": torch.tensor([1])}]
    losses = head.train()(random_v(layout), (64, 64), target)
    assert {"loss_objectness", "loss_rpn_box_reg", "loss_classifier", "loss_box_reg"} <= losses.keys()
    detection_loss(losses).backward()
    with torch.no_grad():
        preds = head.eval()(random_v(layout), (64, 64))
    assert isinstance(preds[0], Detections)
    b = preds[0].boxes
    assert ((b[:, 0] >= 0) & (b[:, 2] <= 64) & (b[:, 1] >= 0) & (b[:, 3] <= 64)).all()
    with pytest.raises(ValueError):
        head.train()(random_v(layout), (64, 64))


def test_detection_degenerate_config():
    layout = {8: 8}
    head = DetectionHead(layout, DetectionHeadConfig(num_classes=2, fpn_channels=16, post_nms_top_n=0, representation_size=32))
    with torch.no_grad():
        preds = head.eval()(random_v(layout), (64, 64))
    assert len(preds) == 1 and len(preds[0]) == 0
    assert preds[0].boxes.shape == (0, 4)


def test_detection_overfit_single_object():
    torch.manual_seed(0)
    mask = torch.zeros(1, 1, 64, 64)
    mask[..., 20:44, 12:40] = 1
    box = torch.tensor([[12.0, 20.0, 40.0, 44.0]])
    # features carry the object's silhouette at every scale
    v = {d: torch.cat([F.avg_pool2d(mask, d).repeat(1, 4, 1, 1), torch.zeros(1, 4, 64 // d, 64 // d)], 1) for d in (8, 16)}
    cfg = DetectionHeadConfig(num_classes=2, fpn_channels=32, representation_size=64, pre_nms_top_n=100, post_nms_top_n=50)
    head = DetectionHead({8: 8, 16: 8}, cfg)
    opt = torch.optim.AdamW(head.parameters(), lr=1e-3)
    target = [{"boxes": box, "labels": torch.tensor([1])}]
    for _ in range(500):
        loss = detection_loss(head.train()(v, (64, 64), target))
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = head.eval()(v, (64, 64))[0]
    assert len(pred) > 0 and pred.labels[0].item() == 1
    assert box_iou(pred.boxes[:1], box).item() > 0.7


layouts = st.dictionaries(st.sampled_from([8, 16, 32]), st.integers(1, 40), min_size=1, max_size=3)


@settings(max_examples=30, deadline=None)
@given(layout=layouts, classes=st.integers(1, 6), seed=st.integers(0, 100))
def test_dense_heads_accept_any_layout(layout, classes, seed):
    torch.manual_seed(seed)
    v = random_v(layout, seed=seed)
    with torch.no_grad():
        seg = SegHead(layout, classes, 8, 8).eval()(v)
        depth = DepthHead(layout, 8, 8).eval()(v)
    assert seg.shape == (1, classes, 64, 64) and torch.isfinite(seg).all()
    assert depth.shape == (1, 1, 64, 64) and (depth > 0).all()
