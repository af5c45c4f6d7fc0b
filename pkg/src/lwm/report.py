"""Accuracy-vs-classes charts and attention grid images built from run directories."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import FormatError, ShapeError  # noqa: E402
from .evaluation import STEP_COLUMNS, read_csv  # noqa: E402
from .gradcam import attention_grid  # noqa: E402

SIDECAR_COLUMNS = ("experiment_id", "n_seen", "top1", "top5", "n_runs")


def run_identity(run_dir) -> tuple[str, str]:
    """(experiment id, seed) of a run directory, from its summary or its path."""
    run_dir = Path(run_dir)
    summary = run_dir / "summary.json"
    if summary.exists():
        try:
            s = json.loads(summary.read_text())
            return s["experiment_id"], str(s["seed"])
        except (ValueError, KeyError):
            raise FormatError("unreadable summary", path=str(summary)) from None
    return run_dir.parent.name, run_dir.name


def load_steps(run_dir) -> list[dict]:
    path = Path(run_dir) / "steps.csv"
    if not path.exists():
        raise FormatError("missing steps.csv", path=str(path))
    try:
        rows = read_csv(path, STEP_COLUMNS)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"bad steps.csv schema: {exc}", path=str(path)) from None
    if not rows:
        raise FormatError("steps.csv has no rows", path=str(path))
    return rows


def curve_points(run_dirs) -> list[dict]:
    """Seed-averaged (experiment id, classes seen) -> accuracy points, in input order of ids."""
    acc = defaultdict(lambda: defaultdict(list))
    for d in run_dirs:
        eid, _ = run_identity(d)
        for r in load_steps(d):
            acc[eid][r["n_seen"]].append((r["top1"], r["top5"]))
    points = []
    for eid, by_n in acc.items():
        for n in sorted(by_n):
            vals = np.asarray(by_n[n])
            points.append({"experiment_id": eid, "n_seen": n, "top1": float(vals[:, 0].mean()),
                           "top5": float(vals[:, 1].mean()), "n_runs": len(vals)})
    return points


def plot_curves(run_dirs, out_dir, stem="accuracy", metric="top1") -> list[Path]:
    """Write ``<stem>.svg``, ``<stem>.png`` and the ``<stem>.csv`` sidecar of plotted points."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = curve_points(run_dirs)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for eid in dict.fromkeys(p["experiment_id"] for p in points):
        ps = [p for p in points if p["experiment_id"] == eid]
        ax.plot([p["n_seen"] for p in ps], [100 * p[metric] for p in ps], marker="o", label=eid)
    ax.set_xlabel("number of classes")
    ax.set_ylabel(f"{metric} accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    paths = [out_dir / f"{stem}.svg", out_dir / f"{stem}.png"]
    fig.savefig(paths[0])
    fig.savefig(paths[1], dpi=120)
    plt.close(fig)
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SIDECAR_COLUMNS, lineterminator="\n")
        w.writeheader()
        for p in points:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in p.items()})
    return paths + [out_dir / f"{stem}.csv"]


def plot_attention(run_dir, out_dir) -> list[Path]:
    """One PNG grid per evaluated step from the raw ``att/step_<t>.npy`` maps."""
    eid, seed = run_identity(run_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in sorted(Path(run_dir, "att").glob("step_*.npy"), key=lambda p: int(p.stem.split("_")[1])):
        try:
            maps = np.load(f)
        except ValueError:
            raise FormatError("unreadable attention maps", path=str(f)) from None
        target = out_dir / f"{eid}_{seed}_{f.stem}.png"
        plt.imsave(target, attention_grid(list(maps)), cmap="gray", vmin=0, vmax=255)
        written.append(target)
    return written


def plot(run_dirs, out_dir) -> list[Path]:
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise FormatError("no run directories given")
    files = plot_curves(run_dirs, out_dir)
    for d in run_dirs:
        files += plot_attention(d, Path(out_dir) / "att")
    return files
