"""Datasets, class schedules, minibatch streams and the data access log."""
from __future__ import annotations

import os
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, FormatError, ScheduleViolation

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE


@dataclass
class LabeledImageSet:
    """Images stored as uint8 (N, C, H, W); ``images()`` gives [0, 1] floats."""

    pixels: np.ndarray
    labels: np.ndarray
    split: str = "train"
    n_classes: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or len(self.pixels) != len(self.labels):
            raise FormatError(f"pixels {self.pixels.shape} and labels {self.labels.shape} do not line up")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise FormatError("label outside the declared class count")
        self.mean = None
        self.std = None

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_index(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.labels == c) for c in range(self.n_classes)}

    def images(self, idx=None, dtype=torch.float64) -> torch.Tensor:
        px = self.pixels if idx is None else self.pixels[idx]
        x = torch.from_numpy(px.astype(np.float64) / 255.0)
        if self.mean is not None:
            x = (x - torch.from_numpy(self.mean)[:, None, None]) / torch.from_numpy(self.std)[:, None, None]
        return x.to(dtype)

    def subset(self, classes) -> "LabeledImageSet":
        mask = np.isin(self.labels, list(classes))
        out = LabeledImageSet(self.pixels[mask], self.labels[mask], self.split, self.n_classes)
        out.mean, out.std = self.mean, self.std
        return out

    def set_standardization(self, mean, std) -> None:
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    def channel_stats(self):
        x = self.pixels.astype(np.float64) / 255.0
        return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3)) + 1e-12


class AccessLog:
    """Append-only record of (step, split, class, count) data accesses."""

    def __init__(self):
        self.records: list[tuple[int, str, int, int]] = []
        self._lock = threading.Lock()

    def record(self, step, split, labels) -> None:
        counts = Counter(int(c) for c in np.asarray(labels).ravel())
        with self._lock:
            for c in sorted(counts):
                self.records.append((int(step), split, c, counts[c]))

    def classes_accessed(self, step, split="train") -> set[int]:
        return {c for s, sp, c, _ in self.records if s == step and sp == split}

    def train_violations(self, schedule) -> list[tuple[int, str, int, int]]:
        """Train-split records for classes outside their own step's batch."""
        return [r for r in self.records
                if r[1] == "train" and r[2] not in set(schedule.batches[r[0]])]

    def extend(self, rows) -> None:
        with self._lock:
            self.records.extend(tuple(r) for r in rows)


@dataclass
class ClassSchedule:
    batches: list[list[int]]
    seed: int | None = None

    def __post_init__(self):
        self.batches = [[int(c) for c in b] for b in self.batches]
        seen: set[int] = set()
        for b in self.batches:
            if not b:
                raise ScheduleViolation("schedule batches must be nonempty")
            if seen & set(b) or len(set(b)) != len(b):
                raise ScheduleViolation("schedule batches overlap")
            seen |= set(b)

    def __len__(self):
        return len(self.batches)

    @property
    def universe(self) -> list[int]:
        return sorted(c for b in self.batches for c in b)

    def known_before(self, t) -> int:
        """N_t: classes learned before step t."""
        return sum(len(b) for b in self.batches[:t])

    def added_at(self, t) -> int:
        """k_t: classes added at step t."""
        return len(self.batches[t])

    def seen_through(self, t) -> list[int]:
        return [c for b in self.batches[:t + 1] for c in b]

    def to_dict(self):
        return {"batches": self.batches, "seed": self.seed}


def split_classes(class_universe, batch_size, seed, base_size=None) -> ClassSchedule:
    """Seeded shuffle, then contiguous chunks.

    The first batch has ``base_size`` classes (default ``batch_size``); the
    final batch may be smaller when the sizes do not divide evenly.
    """
    universe = [int(c) for c in class_universe]
    if not universe:
        raise ConfigurationError("empty class universe")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be positive")
    base_size = batch_size if base_size is None else base_size
    if not 1 <= base_size <= len(universe):
        raise ConfigurationError("base_size must be between 1 and the universe size")
    order = np.random.default_rng(seed).permutation(universe).tolist()
    batches = [order[:base_size]]
    for i in range(base_size, len(order), batch_size):
        batches.append(order[i:i + batch_size])
    return ClassSchedule(batches, seed)


def minibatches(data: LabeledImageSet, classes, batch_size, seed, log: AccessLog | None = None,
                step=0, epoch=0, dtype=torch.float64, with_index=False):
    """Yield shuffled ``(images, labels)`` minibatches restricted to ``classes``.

    The order depends on (seed, epoch) only.  Each yielded batch is recorded
    in ``log`` under ``step``.  ``with_index`` adds the dataset indices as
    a third element.
    """
    classes = sorted(int(c) for c in classes)
    if not set(classes) <= set(range(data.n_classes)):
        raise ConfigurationError("requested classes are not in this dataset")
    idx = np.flatnonzero(np.isin(data.labels, classes))
    if len(idx) == 0:
        raise ConfigurationError(f"no {data.split} images for classes {classes}")
    order = idx[np.random.default_rng([int(seed), int(epoch)]).permutation(len(idx))]
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        labels = data.labels[sel]
        if log is not None:
            log.record(step, data.split, labels)
        if with_index:
            yield data.images(sel, dtype), torch.from_numpy(labels.copy()), sel
        else:
            yield data.images(sel, dtype), torch.from_numpy(labels.copy())


def probe_set(test: LabeledImageSet, classes, per_class=8, seed=0):
    """Fixed indices of ``per_class`` test images from each of ``classes``."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in sorted(int(c) for c in classes):
        idx = np.flatnonzero(test.labels == c)
        if len(idx) == 0:
            raise ConfigurationError(f"no test images for probe class {c}")
        picks.append(np.sort(rng.choice(idx, size=min(per_class, len(idx)), replace=False)))
    return np.concatenate(picks)


# ---------------------------------------------------------------- CIFAR binary


def _record_size(variant, image_size=CIFAR_SIDE, channels=3):
    if variant == "cifar10":
        return 1 + channels * image_size * image_size, 0
    if variant == "cifar100":
        return 2 + channels * image_size * image_size, 1
    raise ConfigurationError(f"unknown CIFAR variant {variant!r}")


def decode_cifar_bytes(buf: bytes, variant="cifar100", image_size=CIFAR_SIDE, channels=3, path=None):
    """Decode concatenated records into (pixels (N, C, H, W), labels, coarse)."""
    rec, label_at = _record_size(variant, image_size, channels)
    if len(buf) == 0 or len(buf) % rec:
        offset = (len(buf) // rec) * rec
        raise FormatError(f"file length {len(buf)} is not a multiple of the {rec}-byte record", offset, path)
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, rec)
    labels = raw[:, label_at].astype(np.int64)
    coarse = raw[:, 0].astype(np.int64) if variant == "cifar100" else None
    header = rec - channels * image_size * image_size
    pixels = raw[:, header:].reshape(-1, channels, image_size, image_size).copy()
    return pixels, labels, coarse


def load_cifar_binary(path, variant="cifar100", split=None, image_size=CIFAR_SIDE, channels=3) -> LabeledImageSet:
    """Load one or more CIFAR binary files (records: label byte(s) + R,G,B planes)."""
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    n_classes = 10 if variant == "cifar10" else 100
    pix, lab = [], []
    for p in paths:
        p = Path(p)
        data = p.read_bytes()
        px, lb, _ = decode_cifar_bytes(data, variant, image_size, channels, path=str(p))
        if lb.max() >= n_classes:
            bad = int(np.argmax(lb >= n_classes))
            rec, label_at = _record_size(variant, image_size, channels)
            raise FormatError(f"label {lb[bad]} out of range", bad * rec + label_at, str(p))
        pix.append(px)
        lab.append(lb)
    if split is None:
        split = "test" if "test" in Path(paths[0]).name else "train"
    return LabeledImageSet(np.concatenate(pix), np.concatenate(lab), split, n_classes)


def encode_cifar_bytes(data: LabeledImageSet, variant="cifar100", coarse=None) -> bytes:
    n = len(data)
    label = data.labels.astype(np.uint8)
    body = data.pixels.reshape(n, -1)
    if variant == "cifar10":
        cols = [label[:, None]]
    else:
        coarse = np.zeros(n, np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols = [coarse[:, None], label[:, None]]
    return np.concatenate(cols + [body], axis=1).astype(np.uint8).tobytes()


def save_cifar_binary(path, data: LabeledImageSet, variant="cifar100") -> None:
    Path(path).write_bytes(encode_cifar_bytes(data, variant))


# ----------------------------------------------------------- synthetic shapes

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar", "xmark", "corner",
          "tee", "dot_pair")
PALETTE = np.array([[1.0, 0.25, 0.2], [0.2, 0.9, 0.3], [0.25, 0.4, 1.0], [0.95, 0.9, 0.2],
                    [0.9, 0.3, 0.9], [0.2, 0.9, 0.9]])


def _shape_mask(kind, u, v):
    """Boolean mask in the shape's local frame; coordinates scaled so the shape spans about [-1, 1]."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    if kind == "circle":
        return r <= 0.9
    if kind == "square":
        return np.maximum(au, av) <= 0.75
    if kind == "triangle":
        return (v >= -0.7) & (v <= 0.9 - 2.2 * au) & (v <= 0.9)
    if kind == "cross":
        return ((au <= 0.25) & (av <= 0.9)) | ((av <= 0.25) & (au <= 0.9))
    if kind == "ring":
        return (r <= 0.95) & (r >= 0.55)
    if kind == "diamond":
        return au + av <= 0.95
    if kind == "hbar":
        return (au <= 0.95) & (av <= 0.3)
    if kind == "vbar":
        return (au <= 0.3) & (av <= 0.95)
    if kind == "xmark":
        return ((np.abs(u - v) <= 0.35) | (np.abs(u + v) <= 0.35)) & (r <= 1.0)
    if kind == "corner":
        return ((u >= -0.8) & (u <= -0.3) & (av <= 0.8)) | ((v >= 0.3) & (v <= 0.8) & (au <= 0.8))
    if kind == "tee":
        return ((v >= 0.4) & (v <= 0.85) & (au <= 0.85)) | ((au <= 0.22) & (v <= 0.85) & (v >= -0.85))
    if kind == "dot_pair":
        return (np.hypot(u - 0.5, v) <= 0.38) | (np.hypot(u + 0.5, v) <= 0.38)
    raise ValueError(kind)


def _paint(img, kind, size, rng, color, scale_range, center_range, rotate=True):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    scale = size * rng.uniform(*scale_range)
    cx = size / 2 + rng.uniform(*center_range) * size
    cy = size / 2 + rng.uniform(*center_range) * size
    theta = rng.uniform(-0.35, 0.35) if rotate else 0.0
    dx, dy = (xs - cx) / scale, (cy - ys) / scale
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(kind, u, v)
    img[:, mask] = color[:, None]


def render_shape(kind, size, rng, color=None, rotate=True, distractors=()):
    """Render one jittered, rotated shape as float RGB (3, size, size) in [0, 1].

    ``distractors`` lists extra shape kinds painted small, away from the
    centre, underneath the main shape.
    """
    bg = rng.uniform(0.0, 0.3, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).copy()
    for other in distractors:
        corner = rng.choice([-1.0, 1.0], size=2)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        scale = size * rng.uniform(0.13, 0.17)
        cx = size / 2 + corner[0] * rng.uniform(0.3, 0.36) * size
        cy = size / 2 + corner[1] * rng.uniform(0.3, 0.36) * size
        u, v = (xs - cx) / scale, (cy - ys) / scale
        img[:, _shape_mask(other, u, v)] = rng.uniform(0.55, 1.0, size=3)[:, None]
    if color is None:
        color = rng.uniform(0.55, 1.0, size=3)
    else:
        color = np.clip(color * rng.uniform(0.8, 1.1), 0, 1)
    lo, hi = (0.22, 0.3) if distractors else (0.3, 0.42)
    _paint(img, kind, size, rng, color, (lo, hi), (-0.12, 0.12) if not distractors else (-0.06, 0.06), rotate)
    img = img + rng.normal(0, 0.05, size=img.shape)
    return np.clip(img, 0, 1)


def synth_shapes(n_classes, n_per_class, image_size=16, seed=0, split="train", distractors=0,
                 n_shapes=None) -> LabeledImageSet:
    """Deterministic synthetic-shapes dataset.

    Class c draws shape ``SHAPES[c % n_shapes]`` (``n_shapes`` defaults to
    all twelve).  When classes outnumber shapes, palette color
    ``c // n_shapes`` joins the shape as part of the class identity, so
    several classes share a shape and differ only in color.  With
    ``distractors`` > 0 every image also carries that many small shapes of
    uniformly random classes near its corners, so images of one class
    contain traces of others.  Train and test splits come from independent
    streams of the same seed.
    """
    if n_classes < 2:
        raise ConfigurationError("synth_shapes needs at least two classes")
    n_shapes = len(SHAPES) if n_shapes is None else int(n_shapes)
    if not 1 <= n_shapes <= len(SHAPES):
        raise ConfigurationError(f"n_shapes must be between 1 and {len(SHAPES)}")
    if n_classes > n_shapes * len(PALETTE):
        raise ConfigurationError(f"at most {n_shapes * len(PALETTE)} synthetic classes with {n_shapes} shapes")
    rng = np.random.default_rng([int(seed), {"train": 0, "test": 1}[split]])
    pixels = np.zeros((n_classes * n_per_class, 3, image_size, image_size), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    colored = n_classes > n_shapes
    for i, c in enumerate(labels):
        kind = SHAPES[c % n_shapes]
        color = PALETTE[c // n_shapes] if colored else None
        extra = [SHAPES[int(o) % n_shapes] for o in rng.integers(0, n_classes, size=distractors)]
        img = render_shape(kind, image_size, rng, color, distractors=extra)
        pixels[i] = np.round(img * 255).astype(np.uint8)
    return LabeledImageSet(pixels, labels, split, n_classes)


# ------------------------------------------------------------ folder loader


def load_image_folder(root, image_size, seed=0, train_fraction=0.8):
    """Class-per-subfolder PPM/PGM images with a seeded per-class train/test split.

    Returns ``(train, test, class_names)``.  Classes are numbered in sorted
    folder-name order.
    """
    from PIL import Image

    root = Path(root)
    names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not names:
        raise ConfigurationError(f"no class folders under {root}")
    rng = np.random.default_rng(seed)
    parts = {"train": ([], []), "test": ([], [])}
    for c, name in enumerate(names):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
        order = rng.permutation(len(files))
        n_train = int(round(train_fraction * len(files)))
        for rank, j in enumerate(order):
            with Image.open(files[j]) as im:
                arr = np.asarray(im.convert("RGB").resize((image_size, image_size)), dtype=np.uint8)
            split = "train" if rank < n_train else "test"
            parts[split][0].append(arr.transpose(2, 0, 1))
            parts[split][1].append(c)
    out = []
    for split in ("train", "test"):
        px, lb = parts[split]
        px = np.stack(px) if px else np.zeros((0, 3, image_size, image_size), np.uint8)
        out.append(LabeledImageSet(px, np.array(lb, dtype=np.int64), split, len(names)))
    return out[0], out[1], names


def augment(images: torch.Tensor, rng: np.random.Generator, flip=False, crop_pad=0) -> torch.Tensor:
    """Optional horizontal flips and padded random crops."""
    out = images
    if flip:
        mask = torch.from_numpy(rng.random(len(out)) < 0.5)
        out = torch.where(mask[:, None, None, None], out.flip(-1), out)
    if crop_pad:
        h, w = out.shape[-2:]
        padded = torch.nn.functional.pad(out, (crop_pad,) * 4)
        crops = []
        for i in range(len(out)):
            dy, dx = rng.integers(0, 2 * crop_pad + 1, size=2)
            crops.append(padded[i, :, dy:dy + h, dx:dx + w])
        out = torch.stack(crops)
    return out
