import csv
import json
import os
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from PIL import Image

from tadp.workbench.cli import main
from tadp.workbench.config import ConfigError, DatasetSpec, ExperimentConfig, interpolate, load_config
from tadp.workbench.datasets import DatasetError, open_dataset
from tadp.workbench.plots import PlotError, emit_comparison, emit_plots, read_metrics
from tadp.workbench.synth import render_scene, synth_dataset

# config


def test_interpolation():
    env = {"ROOT": "/data", "N": "3"}
    assert interpolate({"a": "${ROOT}/x", "b": ["${N}"], "c": 1}, env) == {"a": "/data/x", "b": ["3"], "c": 1}
    assert interpolate("${MISSING:-fallback}", env) == "fallback"
    with pytest.raises(ConfigError, match="MISSING"):
        interpolate("${MISSING}", env)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        ExperimentConfig.from_dict({"name": "x", "bogus": 1})
    with pytest.raises(ConfigError, match=r"\[head\]"):
        ExperimentConfig.from_dict({"name": "x", "head": {"channels": 3}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 1})


def test_resolve_validation():
    for bad in ({"task": "flying"}, {"builder": {"strategy": "Magic"}}, {"modifier": {"kind": "Simple"}},
                {"schedule": {"name": "forever"}}, {"backbone": {"spec": "gpu"}},
                {"builder": {"precision": 0.0}}, {"schedule": {"overrides": {"nope": 1}}}):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"name": "x", **bad}).resolve()


def test_resolve_idempotent_and_hash(tmp_path):
    cfg = ExperimentConfig.from_dict({"name": "x", "output": "out", "dataset": {"root": "data"}}, base_dir=tmp_path)
    once = cfg.resolve()
    assert once.output == str(tmp_path / "out") and once.dataset.root == str(tmp_path / "data")
    assert once.resolve().to_dict() == once.to_dict()
    assert once.resolve().config_hash() == once.config_hash()
    other = ExperimentConfig.from_dict({"name": "x", "output": "out", "dataset": {"root": "data"}}, base_dir=tmp_path)
    assert other.resolve().config_hash() == once.config_hash()
    assert once.replace(seed=1).config_hash() != once.config_hash()


def test_load_config_overrides(tmp_path, monkeypatch):
    path = tmp_path / "cfg" / "exp.toml"
    path.parent.mkdir()
    path.write_text('name = "exp"\noutput = "${OUT_DIR:-runs}"\n[dataset]\nroot = "data"\n')
    cfg = load_config(path)
    assert cfg.output == str(path.parent / "runs") and cfg.dataset.root == str(path.parent / "data")
    monkeypatch.chdir(tmp_path)
    cfg = load_config(path, seed=5, backbone="real:weights/sd")
    assert cfg.seed == 5 and cfg.backbone.spec == f"real:{tmp_path / 'weights' / 'sd'}"
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    (tmp_path / "broken.toml").write_text("name = ")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.toml")


# synthetic data


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_is_byte_identical(tmp_path):
    a = synth_dataset(tmp_path / "a", "depth", n_images=3, n_classes=4, seed=9, n_val=1)
    b = synth_dataset(tmp_path / "b", "depth", n_images=3, n_classes=4, seed=9, n_val=1)
    assert tree_bytes(a) == tree_bytes(b)
    c = synth_dataset(tmp_path / "c", "depth", n_images=3, n_classes=4, seed=10, n_val=1)
    assert tree_bytes(a) != tree_bytes(c)


def test_synth_boxes_are_instance_bboxes():
    rng = np.random.default_rng(0)
    for _ in range(50):
        scene = render_scene(rng, 64, 5, "det")
        inst = scene["instances"]
        expected = []
        for k in range(1, inst.max() + 1):
            ys, xs = np.nonzero(inst == k)
            if ys.size >= 4:
                expected.append([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
        assert scene["boxes"] == [list(map(int, e)) for e in expected]
        for box, cls in zip(scene["boxes"], scene["labels"]):
            x0, y0, x1, y1 = box
            assert (scene["mask"][y0:y1, x0:x1] == cls).any()


def test_synth_validation(tmp_path):
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, "video")
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, size=60)
    with pytest.raises(ValueError):
        synth_dataset(tmp_path, n_classes=1)


def test_synthetic_adapter(seg_root, depth_root, det_root):
    ds = open_dataset(DatasetSpec(name="synthetic", root=str(seg_root)))
    assert ds.task == "segmentation" and len(ds) == 6 and ds.class_names[0] == "background"
    s = ds.load(ds.ids()[0])
    assert s.image.shape == (3, 64, 64) and -1 <= s.image.min() and s.image.max() <= 1
    assert s.mask.shape == (64, 64) and s.mask.max() < len(ds.class_names)
    d = open_dataset(DatasetSpec(name="synthetic", root=str(depth_root)))
    sd = d.load(d.ids()[0])
    assert d.task == "depth" and (sd.depth > 0).all() and sd.meta["room_type"]
    det = open_dataset(DatasetSpec(name="synthetic", root=str(det_root)))
    b = det.load(det.ids()[0])
    assert b.boxes.shape[1] == 4 and len(b.boxes) == len(b.labels) and (b.labels >= 1).all()
    assert open_dataset(DatasetSpec(name="synthetic", root=str(seg_root), limit=2)).ids() == ds.ids()[:2]


def test_dataset_errors(tmp_path):
    with pytest.raises(DatasetError):
        open_dataset(DatasetSpec(name="voc", root=str(tmp_path / "missing")))
    with pytest.raises(DatasetError):
        open_dataset(DatasetSpec(name="voc", root=str(tmp_path)))
    with pytest.raises(DatasetError):
        open_dataset(DatasetSpec(name="imagenet", root=str(tmp_path)))


def test_voc_layouts(tmp_path):
    root = tmp_path / "VOC2012"
    for sub in ("JPEGImages", "SegmentationClass", "ImageSets/Segmentation", "ImageSets/Main", "Annotations"):
        (root / sub).mkdir(parents=True)
    Image.fromarray(np.full((40, 80, 3), 128, np.uint8)).save(root / "JPEGImages" / "img1.jpg")
    mask = np.zeros((40, 80), np.uint8)
    mask[10:30, 20:40] = 12
    mask[0, :] = 255
    Image.fromarray(mask, mode="L").save(root / "SegmentationClass" / "img1.png")
    (root / "ImageSets" / "Segmentation" / "train.txt").write_text("img1\n")
    (root / "ImageSets" / "Main" / "train.txt").write_text("img1\n")
    ann = ET.Element("annotation")
    for name, box, difficult in (("diningtable", (21, 11, 40, 30), "0"), ("dog", (1, 1, 10, 10), "1")):
        obj = ET.SubElement(ann, "object")
        ET.SubElement(obj, "name").text = name
        ET.SubElement(obj, "difficult").text = difficult
        bb = ET.SubElement(obj, "bndbox")
        for k, v in zip(("xmin", "ymin", "xmax", "ymax"), box):
            ET.SubElement(bb, k).text = str(v)
    ET.ElementTree(ann).write(root / "Annotations" / "img1.xml")

    seg = open_dataset(DatasetSpec(name="voc", root=str(root), image_size=40))
    s = seg.load("img1")
    assert s.mask.shape == (40, 40) and set(s.mask.unique().tolist()) == {0, 12, 255}
    det = open_dataset(DatasetSpec(name="voc_det", root=str(root), image_size=40))
    d = det.load("img1")
    # 80x40 resized to 80x40 then centre-cropped by 20 px on the left
    assert d.labels.tolist() == [det.class_names.index("dining table")]
    assert d.boxes.tolist() == [[0.0, 10.0, 20.0, 30.0]]


# plots


def fake_run(tmp_path, n_train=4):
    run = tmp_path / "run"
    run.mkdir()
    rows = [{"split": "train", "step": i, "loss": 1.0 / i, "lr": 1e-4} for i in range(1, n_train + 1)]
    rows.append({"split": "val", "step": n_train, "mIoU_ss": 0.5, "mIoU_ms": None})
    (run / "metrics.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    return run, rows


def test_plots_need_metrics(tmp_path):
    with pytest.raises(PlotError, match="tadp train"):
        read_metrics(tmp_path)
    (tmp_path / "metrics.jsonl").write_text("")
    with pytest.raises(PlotError):
        emit_plots(tmp_path)


def test_plot_csv_rows_and_stable_bytes(tmp_path):
    run, rows = fake_run(tmp_path)
    paths = emit_plots(run)
    names = sorted(p.name for p in paths)
    assert names == ["loss.png", "metrics.csv", "metrics.png"]
    with open(run / "plots" / "metrics.csv", newline="") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(rows)
    assert list(table[0])[:2] == ["split", "step"]
    first = {p.name: p.read_bytes() for p in paths}
    again = {p.name: p.read_bytes() for p in emit_plots(run)}
    assert first == again


def test_comparison(tmp_path):
    runs = []
    for name, value in (("a", 0.4), ("b", 0.6)):
        run = tmp_path / name
        run.mkdir()
        (run / "metrics.jsonl").write_text(json.dumps({"split": "val", "step": 1, "mIoU_ss": value}) + "\n")
        runs.append(run)
    paths = emit_comparison(runs, "mIoU_ss", tmp_path / "cmp")
    assert {p.name for p in paths} == {"compare_mIoU_ss.csv", "compare_mIoU_ss.png"}
    with open(tmp_path / "cmp" / "compare_mIoU_ss.csv", newline="") as fh:
        assert [r["mIoU_ss"] for r in csv.DictReader(fh)] == ["0.4", "0.6"]


# command line


@pytest.fixture(scope="module")
def cli_project(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", str(root / "data"), "--n-images", "4", "--n-classes", "3", "--seed", "2"]) == 0
    (root / "exp.toml").write_text(
        'name = "cli"\nseed = 0\noutput = "out"\nfixture_dir = "data/fixtures"\n'
        '[dataset]\nname = "synthetic"\nroot = "data"\n'
        '[builder]\nstrategy = "Caption"\n'
        '[schedule]\nname = "ade_fast_4k"\noverrides = {max_steps = 2, warmup_iters = 0}\nlog_every = 1\n'
        '[head]\nfpn_channels = 16\ndecoder_channels = 16\n'
    )
    return root


def test_cli_exit_codes(cli_project, tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--config", str(cli_project / "exp.toml"), "--bogus"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    assert main(["train", "-c", str(tmp_path / "missing.toml")]) == 1
    # the caption cache has not been written yet: a runtime failure
    assert main(["train", "-c", str(cli_project / "exp.toml"), "--output", str(tmp_path / "o")]) == 2
    assert main(["plot", "--run", str(tmp_path)]) == 1
    assert "tadp caption" in capsys.readouterr().err


def test_cli_pipeline(cli_project, tmp_path):
    cfg = str(cli_project / "exp.toml")
    assert main(["caption", "-c", cfg]) == 0
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "-c", cfg, "--output", str(out_a)]) == 0
    assert main(["train", "-c", cfg, "--output", str(out_b)]) == 0
    run_a, run_b = out_a / "runs" / "cli", out_b / "runs" / "cli"
    assert (run_a / "metrics.jsonl").read_bytes() == (run_b / "metrics.jsonl").read_bytes()
    assert main(["eval", "-c", cfg, "--output", str(out_a)]) == 0
    report = json.loads((run_a / "eval_train.json").read_text())
    assert 0 <= report["mIoU_ss"] <= 1
    ds = open_dataset(DatasetSpec(name="synthetic", root=str(cli_project / "data")))
    image = ds.ids()[0]
    assert main(["analyze", "attention", "-c", cfg, "--output", str(out_a), "--image", image,
                 "--tokens", "a,picture,of"]) == 0
    maps = sorted((run_a / "analysis" / "attention").glob("attn_*.png"))
    assert len(maps) == 3
    assert main(["plot", "--run", str(run_a)]) == 0
    assert (run_a / "plots" / "metrics.csv").exists()


def test_cli_synth_matches_library(tmp_path):
    assert main(["synth", str(tmp_path / "x"), "--n-images", "2", "--seed", "4"]) == 0
    lib = synth_dataset(tmp_path / "y", n_images=2, seed=4)
    assert tree_bytes(tmp_path / "x") == tree_bytes(lib)
    assert not os.environ.get("TADP_CAPTION_ENDPOINT")
