"""Figures and their CSV data from a run directory."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "tadp",
}
FIRST_COLUMNS = ("split", "step")


class PlotError(ValueError):
    pass


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise PlotError(f"{run_dir} has no metrics.jsonl; run `tadp train` first")
    records = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not records:
        raise PlotError(f"{path} is empty")
    return records


def write_csv(path: Path, rows: list[dict]) -> Path:
    keys = sorted({k for r in rows for k in r})
    cols = [k for k in FIRST_COLUMNS if k in keys] + [k for k in keys if k not in FIRST_COLUMNS]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in cols})
    return path


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _numeric(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and v is not None and math.isfinite(v)


def emit_plots(run_dir: str | Path) -> list[Path]:
    """Write plots/metrics.csv, the loss curve, the final metric bars and any analysis figures."""
    run_dir = Path(run_dir)
    records = read_metrics(run_dir)
    out = run_dir / "plots"
    written = [write_csv(out / "metrics.csv", records)]
    with plt.rc_context(STYLE):
        train = [r for r in records if r.get("split") == "train" and _numeric(r.get("loss"))]
        if train:
            fig, ax = plt.subplots(figsize=(4, 3))
            ax.plot([r["step"] for r in train], [r["loss"] for r in train], marker="o", ms=2)
            ax.set_xlabel("step")
            ax.set_ylabel("training loss")
            written.append(_save(fig, out / "loss.png"))
        val = [r for r in records if r.get("split") == "val"]
        if val:
            final = val[-1]
            keys = [k for k in sorted(final) if k not in FIRST_COLUMNS and _numeric(final[k])]
            if keys:
                fig, ax = plt.subplots(figsize=(4, 3))
                ax.bar(keys, [final[k] for k in keys], color="tab:blue")
                ax.set_title(f"step {final.get('step')}")
                written.append(_save(fig, out / "metrics.png"))
        for name, xlabel, ylabel in (("recall", "recall", "mIoU"), ("object_size", "relative_size", "IoU")):
            path = run_dir / "analysis" / f"{name}.csv"
            if path.exists():
                written.append(scatter_from_csv(path, xlabel, ylabel, out / f"{name}.png"))
        for path in sorted((run_dir / "analysis").glob("confusion_*.csv")):
            written.append(heatmap_from_csv(path, out / f"{path.stem}.png"))
    return written


def scatter_from_csv(path: Path, x: str, y: str, out: Path) -> Path:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.scatter([float(r[x]) for r in rows], [float(r[y]) for r in rows], s=8)
        ax.set_xlabel(x)
        ax.set_ylabel(y)
        return _save(fig, out)


def write_matrix_csv(path: Path, mat: np.ndarray, names: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gt", *names])
        for name, row in zip(names, mat):
            w.writerow([name, *("" if not np.isfinite(v) else f"{v:.6f}" for v in row)])
    return path


def heatmap_from_csv(path: Path, out: Path) -> Path:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    mat = np.array([[float(v) if v else np.nan for v in r[1:]] for r in rows[1:]])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(mat, cmap="magma", vmin=0, vmax=1)
        ax.set_xticks(range(len(names)), names, rotation=90, fontsize=6)
        ax.set_yticks(range(len(names)), names, fontsize=6)
        ax.set_xlabel("predicted")
        ax.set_ylabel("ground truth")
        ax.grid(False)
        fig.colorbar(im, ax=ax)
        return _save(fig, out)


def emit_comparison(run_dirs: list[str | Path], metric: str, out_dir: str | Path) -> list[Path]:
    """Bar chart of one final validation metric across runs (one bar per run)."""
    rows = []
    for rd in run_dirs:
        val = [r for r in read_metrics(rd) if r.get("split") == "val"]
        if not val or not _numeric(val[-1].get(metric)):
            raise PlotError(f"{rd} has no final {metric}")
        rows.append({"run": Path(rd).name, metric: val[-1][metric]})
    out_dir = Path(out_dir)
    written = [write_csv(out_dir / f"compare_{metric}.csv", rows)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3, len(rows)), 3))
        ax.bar([r["run"] for r in rows], [r[metric] for r in rows], color="tab:orange")
        ax.set_ylabel(metric)
        ax.tick_params(axis="x", rotation=30)
        written.append(_save(fig, out_dir / f"compare_{metric}.png"))
    return written
