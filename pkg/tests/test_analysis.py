import numpy as np
import pytest
import torch

from tadp.backbone import aggregate_attention, encode_and_scale, extract_features
from tadp.engine.analysis import (
    Patch,
    caption_recall_analysis,
    copy_paste_probe,
    object_size_analysis,
    paste,
    pearson,
    pixel_confusion,
    present_vs_all_conditioning,
    recalled_classes,
    save_attention_maps,
    text_encoder_embedder,
    token_maps,
)
from tadp.heads import SegHead
from tadp.prompting import ClassVocabulary, build_class_names, build_from_caption
from tadp.workbench.config import DatasetSpec
from tadp.workbench.datasets import open_dataset

CLASSES = ["dog", "bird", "dining table"]
STOP = ["a", "the", "of", "and", "with"]


def fixture_embedder(texts):
    """Class names and stop-words on orthogonal axes; anything else is the zero vector."""
    axes = CLASSES + STOP
    out = np.zeros((len(texts), len(axes)))
    for i, t in enumerate(texts):
        if t in axes:
            out[i, axes.index(t)] = 1.0
    return out


def test_recall_stop_words_and_verbatim():
    assert recalled_classes("a the of and with", CLASSES, fixture_embedder) == []
    assert recalled_classes("a dog with a bird by the dining table", CLASSES, fixture_embedder) == CLASSES
    assert recalled_classes("a dining room", CLASSES, fixture_embedder) == []


def test_recall_verbatim_with_text_encoder(text_encoder):
    embed = text_encoder_embedder(text_encoder)
    assert recalled_classes("a bird and a dog on a dining table", CLASSES, embed) == CLASSES


def test_recall_analysis_rows_and_missing():
    captions = {"a": "a dog and a bird", "b": "a dog", "c": "the of"}
    present = {"a": ["dog", "bird"], "b": ["dog", "bird"], "c": ["dog"], "d": ["bird"]}
    miou = {"a": 0.9, "b": 0.5, "c": 0.2, "d": 0.1}
    res = caption_recall_analysis(captions, present, miou, fixture_embedder)
    assert [(r["image_id"], r["recall"]) for r in res.rows] == [("a", 1.0), ("b", 0.5), ("c", 0.0)]
    assert res.missing == ["d"]
    assert res.r == pytest.approx(pearson([1.0, 0.5, 0.0], [0.9, 0.5, 0.2]))
    assert res.r > 0


def test_object_size_hand_case():
    gt = np.full((4, 4), 2)
    gt[:2, :2] = 1
    pred = gt.copy()
    pred[1, :2] = 2  # half of the small region is missed
    res = object_size_analysis([pred], [gt])
    rows = {r["class"]: (r["relative_size"], r["IoU"]) for r in res.rows}
    assert rows == {1: (0.25, 0.5), 2: (0.75, 12 / 14)}
    assert res.r == pytest.approx(1.0)


def test_object_size_perfect_flags_undefined():
    gt = np.array([[0, 0, 1], [2, 2, 2]])
    res = object_size_analysis([gt], [gt])
    assert all(r["IoU"] == 1.0 for r in res.rows)
    assert res.r is None and res.undefined
    with pytest.raises(ValueError):
        object_size_analysis([np.zeros((2, 2))], [np.zeros((3, 3))])


def test_object_size_ignores_void():
    gt = np.array([[1, 255], [1, 255]])
    res = object_size_analysis([np.array([[1, 1], [1, 1]])], [gt])
    assert res.rows == [{"image": 0, "class": 1, "relative_size": 0.5, "IoU": 1.0}]


def test_confusion_untrained_is_near_uniform(stub, seg_root):
    ds = open_dataset(DatasetSpec(name="synthetic", root=str(seg_root)))
    vocab = ClassVocabulary(tuple(ds.class_names))
    present, everything = present_vs_all_conditioning(stub.text_encoder, vocab)
    layout = stub.config.v_layout(stub.text_encoder.max_tokens)
    torch.manual_seed(0)
    head = SegHead(layout, len(vocab), 16, 16).eval()

    def predict(image, cond):
        v = extract_features(encode_and_scale(image, stub), cond, stub)
        return head(v, out_size=image.shape[-2:])

    samples = [ds.load(i) for i in ds.ids()[:3]]
    a, b = pixel_confusion(predict, present, everything, samples, len(vocab))
    K = len(vocab)
    for mat in (a, b):
        rows = mat[~np.isnan(mat).any(1)]
        assert len(rows) > 0
        assert np.allclose(rows.sum(1), 1.0, atol=1e-5)
        assert np.abs(rows - 1 / K).max() < 0.05


def test_attention_map_files(stub, tmp_path):
    cond = build_from_caption("a bird and a dog", stub.text_encoder)
    paths = save_attention_maps(torch.rand(3, 64, 64) * 2 - 1, "img 1", cond, ["bird", "dog", "a"], stub, tmp_path)
    assert [p.name for p in paths] == ["attn_img_1_2_bird.png", "attn_img_1_5_dog.png", "attn_img_1_1_a.png"]
    assert all(p.read_bytes()[:4] == b"\x89PNG" for p in paths)


def test_token_maps_are_aggregate_attention(stub):
    img = torch.rand(3, 64, 64) * 2 - 1
    cond = build_class_names(ClassVocabulary(("dog", "bird")), stub.text_encoder)
    maps = token_maps(img, cond, stub, 32)
    with torch.no_grad():
        bundle = extract_features(encode_and_scale(img.unsqueeze(0), stub), cond, stub)
    assert torch.equal(maps, aggregate_attention(bundle, 32)[0])
    assert torch.allclose(maps.sum(0), torch.ones(32, 32), atol=1e-4)


def test_copy_paste_counts_and_base(stub, tmp_path):
    img = torch.rand(3, 64, 64) * 2 - 1
    cond = build_class_names(ClassVocabulary(("dog", "bird", "cat")), stub.text_encoder)
    patches = [Patch("cat", torch.ones(3, 16, 16), 10, 10), Patch("edge", -torch.ones(3, 16, 16), 56, -8)]
    tokens = ["dog", "cat"]
    maps = copy_paste_probe(img, patches, tokens, stub, cond, out_dir=tmp_path)
    assert len(maps) == len(tokens) * (1 + len(patches))
    assert len(list(tmp_path.glob("paste_*.png"))) == len(maps)
    plain = token_maps(img, cond, stub)
    assert torch.equal(maps[("base", "dog")], plain[cond.token_index("dog")])
    assert copy_paste_probe(img, [], tokens, stub, cond).keys() == {("base", "dog"), ("base", "cat")}


def test_paste_bounds():
    base = torch.zeros(3, 8, 8)
    out = paste(base, Patch("p", torch.ones(3, 4, 4), 6, 6))
    assert out[:, 6:, 6:].eq(1).all() and out[:, :6].eq(0).all()
    with pytest.raises(ValueError, match="outside"):
        paste(base, Patch("p", torch.ones(3, 4, 4), 8, 0))
    with pytest.raises(ValueError, match="outside"):
        paste(base, Patch("p", torch.ones(3, 4, 4), -4, 2))


def test_pearson_undefined():
    assert pearson([1.0], [2.0]) is None
    assert pearson([1.0, 1.0], [2.0, 3.0]) is None
    assert pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0)
