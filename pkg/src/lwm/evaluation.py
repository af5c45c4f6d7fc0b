"""Single-headed evaluation, per-step accuracy tables and attention retention."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import ScheduleViolation, ShapeError
from .gradcam import attention_divergence, cam_from_features
from .losses import top_base_class
from .netcore import forward

STEP_COLUMNS = ("step", "n_seen", "top1", "top5", "base_top1", "new_top1", "att_div")
EPOCH_COLUMNS = ("step", "epoch", "L_C", "L_D", "L_AD", "L_total")


@dataclass
class StepMetrics:
    step: int
    n_seen: int
    top1: float
    top5: float
    base_top1: float
    new_top1: float
    att_div: float
    n_base_items: int = 0
    n_new_items: int = 0
    epoch_traces: list = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in STEP_COLUMNS}


def topk_hits(logits, labels, k_top) -> np.ndarray:
    """Boolean per item: is the label among the ``k_top`` highest logits (lowest index wins ties)."""
    logits = np.asarray(torch.as_tensor(logits).detach().cpu().numpy(), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ScheduleViolation("test label lies outside the model head (unseen class)")
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k_top]
    return (order == labels[:, None]).any(axis=1)


def predict_logits(model, images, batch_size=256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            outs.append(forward(model, images[i:i + batch_size])[0])
    return torch.cat(outs) if outs else torch.zeros((0, model.head_size))


def single_headed_accuracy(model, images, labels, k_top=1) -> float:
    """Fraction of items whose head-index label is in the model's top-k over the full head."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ShapeError("empty test set")
    if len(labels) and labels.max() >= model.head_size:
        raise ScheduleViolation("test label lies outside the model head (unseen class)")
    return float(topk_hits(predict_logits(model, images), labels, k_top).mean())


def evaluate_step(model, images, labels, n_base, step, att_div=0.0) -> StepMetrics:
    """Top-1/top-5 over all seen classes plus the base/new split.

    Labels are head indices; indices below ``n_base`` count as base classes.
    """
    labels = np.asarray(labels)
    logits = predict_logits(model, images)
    hit1 = topk_hits(logits, labels, 1)
    hit5 = topk_hits(logits, labels, 5)
    base = labels < n_base
    nb, nn = int(base.sum()), int((~base).sum())
    return StepMetrics(
        step=step,
        n_seen=model.head_size,
        top1=float(hit1.mean()),
        top5=float(hit5.mean()),
        base_top1=float(hit1[base].mean()) if nb else math.nan,
        new_top1=float(hit1[~base].mean()) if nn else math.nan,
        att_div=float(att_div),
        n_base_items=nb,
        n_new_items=nn,
    )


def accuracy_matrix(history) -> list[dict]:
    """Rows of (step, n_seen, overall, base-only, new-only) accuracy."""
    if not history:
        raise ValueError("accuracy_matrix needs at least one evaluated step")
    return [{"step": m.step, "n_seen": m.n_seen, "overall": m.top1, "base": m.base_top1, "new": m.new_top1,
             "n_base_items": m.n_base_items, "n_new_items": m.n_new_items} for m in history]


def weighted_mean_gap(row) -> float:
    """|overall - example-weighted mean of base and new| for one accuracy row."""
    nb, nn = row["n_base_items"], row["n_new_items"]
    parts = (nb * (row["base"] if nb else 0.0) + nn * (row["new"] if nn else 0.0)) / (nb + nn)
    return abs(row["overall"] - parts)


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path, columns=None) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if columns is not None and tuple(reader.fieldnames or ()) != tuple(columns):
            raise ShapeError(f"{path}: expected columns {list(columns)}, got {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append({k: (int(v) if k in ("step", "epoch", "n_seen") else float(v)) for k, v in r.items()})
        return rows


# --------------------------------------------------------- attention retention


@dataclass
class ProbeReference:
    """M_0's attention on the probe images: target classes and maps.

    Holding these arrays instead of M_0 itself keeps one teacher in memory.
    """

    indices: np.ndarray
    classes: np.ndarray
    maps: np.ndarray

    def to_dict(self):
        return {"indices": self.indices.tolist(), "classes": self.classes.tolist(), "maps": self.maps.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["indices"], np.int64), np.asarray(d["classes"], np.int64),
                   np.asarray(d["maps"], np.float64))


def probe_maps(model, images, classes) -> np.ndarray:
    """Grad-CAM maps (B, H, W) of ``model`` at the given per-image classes."""
    with torch.enable_grad():
        logits, feats = forward(model, images)
        q, _ = cam_from_features(logits, feats, torch.as_tensor(classes), higher_order=False)
    return q.detach().cpu().numpy().astype(np.float64)


def make_probe_reference(m0, images, labels, indices, source="teacher") -> ProbeReference:
    """Pick each probe image's class (M_0's top base class, or its label) and record M_0's map."""
    if source == "teacher":
        with torch.no_grad():
            logits = forward(m0, images)[0]
        classes = top_base_class(logits, m0.head_size).numpy()
    else:
        classes = np.asarray(labels, np.int64)
    return ProbeReference(np.asarray(indices), np.asarray(classes), probe_maps(m0, images, classes))


def retention_divergence(model, images, ref: ProbeReference) -> tuple[float, np.ndarray]:
    """Mean divergence between ``model``'s probe maps and the reference; also returns the maps."""
    maps = probe_maps(model, images, ref.classes)
    divs = [attention_divergence(torch.from_numpy(a), torch.from_numpy(b)) for a, b in zip(maps, ref.maps)]
    return float(np.mean(divs)), maps


def attention_retention_curve(models, images, m0, labels=None, source="teacher") -> list[float]:
    """Mean probe divergence from M_0 for each model in step order."""
    ref = make_probe_reference(m0, images, labels, np.arange(len(images)), source)
    return [retention_divergence(m, images, ref)[0] for m in models]


def history_rows(history) -> list[dict]:
    return [asdict(m) for m in history]
