"""Grad-CAM attention maps and the attention distillation penalty."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ClassRangeError, ConfigurationError, ShapeError
from .netcore import forward

DEFAULT_EPS = 1e-8


@dataclass
class AttentionMap:
    """Grad-CAM map ``q`` of shape (H, W), or (B, H, W) for a batch.

    ``class_id`` is an int, or a (B,) tensor when each image targets its own class.
    """

    q: torch.Tensor
    class_id: object
    source: str = ""
    alpha: torch.Tensor | None = None

    @property
    def length(self) -> int:
        return int(self.q.shape[-1] * self.q.shape[-2])

    @property
    def batched(self) -> bool:
        return self.q.dim() == 3

    def numpy(self) -> np.ndarray:
        return self.q.detach().cpu().numpy().astype(np.float64)


def _as_class_tensor(c, batch, head_size):
    c = torch.as_tensor(c, dtype=torch.long)
    if c.dim() == 0:
        c = c.expand(batch)
    if c.shape != (batch,):
        raise ShapeError(f"need one class id per image, got shape {tuple(c.shape)} for batch {batch}")
    if (c < 0).any() or (c >= head_size).any():
        raise ClassRangeError(f"class id out of range for head of size {head_size}")
    return c


def cam_from_features(logits, features, classes, higher_order=False):
    """Grad-CAM from an existing forward pass.

    Returns ``(q, alpha)`` with q of shape (B, H, W) and alpha of shape (B, K).
    ``features`` must be on the graph that produced ``logits``.
    """
    if features is None or not features.requires_grad:
        raise ConfigurationError("tap-layer features are not differentiable; Grad-CAM needs them")
    classes = _as_class_tensor(classes, logits.shape[0], logits.shape[1])
    # images are independent, so one backward of the summed scores gives every per-image gradient
    score = logits.gather(1, classes[:, None]).sum()
    (dscore_dA,) = torch.autograd.grad(score, features, create_graph=higher_order, retain_graph=True)
    alpha = dscore_dA.mean(dim=(2, 3))
    q = torch.relu((alpha[:, :, None, None] * features).sum(dim=1))
    if not higher_order:
        q, alpha = q.detach(), alpha.detach()
    return q, alpha


def grad_cam(model, image, c, higher_order=False) -> AttentionMap:
    """Class-``c`` Grad-CAM map of ``model`` for one image (C, H, W) or a batch.

    Uses the raw pre-activation score y^c.  With ``higher_order`` (student
    only) the map stays differentiable with respect to the parameters.
    """
    x = torch.as_tensor(image)
    single = x.dim() == 3
    if single:
        x = x[None]
    if model.tap_layer is None:
        raise ConfigurationError("model has no tap layer")
    with torch.enable_grad():
        logits, features = forward(model, x)
        q, alpha = cam_from_features(logits, features, c, higher_order and not model.frozen)
    if single:
        q, alpha = q[0], alpha[0]
    tag = "teacher" if model.frozen else "student"
    return AttentionMap(q, c if single or not torch.is_tensor(c) else c.clone(), tag, alpha)


def _q(m):
    return m.q if isinstance(m, AttentionMap) else torch.as_tensor(m)


def normalize_vectorize(q, eps=DEFAULT_EPS) -> torch.Tensor:
    """vec(Q) / (||vec(Q)||_2 + eps); leading batch dimension preserved.

    A 2-D map is flattened to length H*W; (B, H, W) becomes (B, H*W); a
    1-D input is treated as already vectorized.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    q = _q(q)
    if q.dim() == 1:
        v = q
    elif q.dim() == 2:
        v = q.reshape(-1)
    else:
        v = q.reshape(q.shape[0], -1)
    norm = torch.linalg.vector_norm(v, ord=2, dim=-1, keepdim=True)
    return v / (norm + eps)


def attention_distillation_loss(q_teacher, q_student, eps=DEFAULT_EPS, distance="l1") -> torch.Tensor:
    """Sum over positions of |v_teacher - v_student| between normalized maps.

    Batched inputs are averaged over the batch.  The teacher side is
    detached.  ``distance="l2"`` swaps the outer L1 for the Euclidean norm.
    """
    qt, qs = _q(q_teacher).detach(), _q(q_student)
    if qt.shape != qs.shape:
        raise ShapeError(f"attention maps differ in shape: {tuple(qt.shape)} vs {tuple(qs.shape)}")
    diff = normalize_vectorize(qt, eps) - normalize_vectorize(qs, eps)
    if distance == "l1":
        per_image = diff.abs().sum(dim=-1)
    elif distance == "l2":
        per_image = torch.linalg.vector_norm(diff, ord=2, dim=-1)
    else:
        raise ConfigurationError(f"unknown attention distance {distance!r}")
    return per_image.mean()


def attention_divergence(map_a, map_b, eps=DEFAULT_EPS) -> float:
    """Non-differentiable normalized L1 distance, for reporting retention."""
    with torch.no_grad():
        return float(attention_distillation_loss(_q(map_a).detach(), _q(map_b).detach(), eps))


def to_pgm(q) -> bytes:
    """Binary 8-bit PGM of one map, min-max scaled to 0..255."""
    a = np.asarray(q.numpy() if isinstance(q, AttentionMap) else torch.as_tensor(q).detach().numpy(),
                   dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError("PGM export needs a single 2-D map")
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    h, w = pixels.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def attention_grid(maps, ncols=8, pad=1) -> np.ndarray:
    """Tile per-map min-max scaled maps into one uint8 image."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ShapeError("no maps to tile")
    h, w = maps[0].shape
    ncols = min(ncols, len(maps))
    nrows = -(-len(maps) // ncols)
    grid = np.zeros((nrows * (h + pad) - pad, ncols * (w + pad) - pad), dtype=np.uint8)
    for i, a in enumerate(maps):
        lo, hi = a.min(), a.max()
        tile = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
        r, c = divmod(i, ncols)
        grid[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = np.round(tile * 255)
    return grid


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        with open(path, "wb") as fh:
            fh.write(to_pgm(torch.as_tensor(img, dtype=torch.float64)))
        return
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
