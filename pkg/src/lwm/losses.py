"""Classification, distillation and combined objectives for the three experiment IDs."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F

from .errors import ClassRangeError, ConfigurationError, NumericalFailure, ShapeError


class ExperimentId(str, Enum):
    FINETUNING = "Finetuning"
    LWF_MC = "LwF-MC"
    LWM = "LwM"

    @classmethod
    def parse(cls, value) -> "ExperimentId":
        if isinstance(value, cls):
            return value
        for member in cls:
            if member.value.lower() == str(value).strip().lower():
                return member
        raise ConfigurationError(f"unknown experiment id {value!r}; expected one of {[m.value for m in cls]}")

    @property
    def uses_distillation(self) -> bool:
        return self is not ExperimentId.FINETUNING

    @property
    def uses_attention(self) -> bool:
        return self is ExperimentId.LWM


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    gamma: float = 1.0
    experiment_id: ExperimentId = ExperimentId.LWM

    def __post_init__(self):
        object.__setattr__(self, "experiment_id", ExperimentId.parse(self.experiment_id))
        if self.beta < 0 or self.gamma < 0:
            raise ConfigurationError("beta and gamma must be nonnegative")
        if self.experiment_id is ExperimentId.LWM and not (self.beta > 0 and self.gamma > 0):
            raise ConfigurationError("LwM needs beta > 0 and gamma > 0")

    @property
    def effective(self) -> tuple[float, float]:
        """(beta, gamma) after zeroing the terms the experiment ID leaves out."""
        eid = self.experiment_id
        return (self.beta if eid.uses_distillation else 0.0,
                self.gamma if eid.uses_attention else 0.0)


def classification_loss(student_logits, labels, head_mode="full", new_classes=None) -> torch.Tensor:
    """Mean softmax cross-entropy.

    ``head_mode="full"`` lets every head output compete (single-headed).
    ``head_mode="new"`` restricts the softmax to the columns in ``new_classes``.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() == 0:
        labels = labels[None]
    if student_logits.dim() == 1:
        student_logits = student_logits[None]
    n = student_logits.shape[1]
    if (labels < 0).any() or (labels >= n).any():
        raise ClassRangeError(f"label out of range for head of size {n}")
    if head_mode == "full":
        return F.cross_entropy(student_logits, labels)
    if head_mode == "new":
        if new_classes is None:
            raise ConfigurationError("head_mode='new' needs the list of new classes")
        cols = torch.as_tensor(list(new_classes), dtype=torch.long)
        remap = torch.full((n,), -1, dtype=torch.long)
        remap[cols] = torch.arange(len(cols))
        local = remap[labels]
        if (local < 0).any():
            raise ClassRangeError("label is not one of the new classes")
        return F.cross_entropy(student_logits[:, cols], local)
    raise ConfigurationError(f"unknown lc_head_mode {head_mode!r}")


def distillation_loss(teacher_logits, student_logits, form="full-bce") -> torch.Tensor:
    """Sigmoid distillation over the teacher's N base classes.

    ``student_logits`` are truncated to their first N columns, so new-class
    outputs never enter.  ``form="positive-only"`` keeps only the -sigma(y)*log sigma(y_hat)
    term; ``"full-bce"`` adds the complementary term.  Summed over classes,
    averaged over the batch.  The teacher side is detached.
    """
    t = torch.as_tensor(teacher_logits).detach()
    s = torch.as_tensor(student_logits)
    if t.dim() == 1:
        t, s = t[None], s[None]
    n = t.shape[1]
    if s.shape[0] != t.shape[0] or s.shape[1] < n:
        raise ShapeError(f"student logits {tuple(s.shape)} cannot cover teacher logits {tuple(t.shape)}")
    s = s[:, :n]
    target = torch.sigmoid(t)
    if form == "full-bce":
        per_class = F.binary_cross_entropy_with_logits(s, target, reduction="none")
    elif form == "positive-only":
        # logsigmoid stays exact for large |s|; softplus switches to a linear branch above 20
        per_class = -target * F.logsigmoid(s)
    else:
        raise ConfigurationError(f"unknown distillation_form {form!r}")
    return per_class.sum(dim=1).mean()


def top_base_class(logits, n_base):
    """Argmax over the first ``n_base`` logits; the lowest index wins ties.

    Returns an int for a single logit vector, else a (B,) long tensor.
    """
    logits = torch.as_tensor(logits).detach()
    if not 1 <= n_base <= logits.shape[-1]:
        raise ValueError(f"need 1 <= N <= head_size, got N={n_base}")
    base = logits[..., :n_base]
    # torch.argmax returns the first maximal index
    b = torch.argmax(base, dim=-1)
    return int(b) if b.dim() == 0 else b


def combined_loss(l_c, l_d, l_ad, weights: LossWeights):
    """L_C + beta*L_D + gamma*L_AD, dropping terms the experiment ID excludes.

    Excluded terms may be passed as None.
    """
    beta, gamma = weights.effective
    total = l_c
    terms = [("L_C", l_c, 1.0), ("L_D", l_d, beta), ("L_AD", l_ad, gamma)]
    for name, value, coef in terms:
        if coef == 0 and name != "L_C":
            continue
        if value is None:
            raise ConfigurationError(f"{name} is required for {weights.experiment_id.value}")
        v = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(v):
            raise NumericalFailure(f"{name} is not finite")
        if name != "L_C":
            total = total + coef * value
    return total
