import os
import socket
from collections import defaultdict

import pytest
import torch

from tadp.backbone import default_stub_config, make_stub_backbone
from tadp.workbench.synth import synth_dataset

# tests never touch the network or real weights
for var in ("TADP_CAPTION_ENDPOINT", "TADP_CLEANER_ENDPOINT", "TADP_FIXTURE_DIR"):
    os.environ.pop(var, None)

torch.set_num_threads(1)

_acceptance: dict[int, dict] = defaultdict(lambda: {"title": "", "outcomes": []})


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("acceptance")
        if m is not None:
            entry = _acceptance[m.args[0]]
            entry["title"] = m.args[1]


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _acceptance[m.args[0]]["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        entry = _acceptance[number]
        outs = entry["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif "failed" in outs:
            status = "FAIL"
        elif all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"ACCEPTANCE {number}: {status} - {entry['title']}")


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Any real connection attempt fails the test."""

    def refuse(*args, **kwargs):
        raise NetworkBlocked(f"network access attempted: {args[1:] or kwargs}")

    monkeypatch.setattr(socket.socket, "connect", refuse)
    monkeypatch.setattr(socket.socket, "connect_ex", refuse)
    monkeypatch.setattr(socket, "create_connection", refuse)


@pytest.fixture
def stub():
    return make_stub_backbone(default_stub_config(), seed=0)


@pytest.fixture
def text_encoder(stub):
    return stub.text_encoder


@pytest.fixture(scope="session")
def seg_root(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("seg"), "seg", n_images=6, n_classes=3, seed=1, size=64)


@pytest.fixture(scope="session")
def depth_root(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("depth"), "depth", n_images=4, n_classes=3, seed=2, size=64)


@pytest.fixture(scope="session")
def det_root(tmp_path_factory):
    return synth_dataset(tmp_path_factory.mktemp("det"), "det", n_images=4, n_classes=3, seed=3, size=64)


def seg_config(root, out, **sections):
    """A tiny, fast segmentation config as a dict."""
    cfg = {
        "name": "tiny",
        "seed": 0,
        "output": str(out),
        "dataset": {"name": "synthetic", "root": str(root), "image_size": 64},
        "builder": {"strategy": "ClassNames"},
        "schedule": {"name": "ade_fast_4k", "overrides": {"max_steps": 3, "warmup_iters": 0}, "log_every": 1},
        "head": {"fpn_channels": 16, "decoder_channels": 16},
    }
    for k, v in sections.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    return cfg
