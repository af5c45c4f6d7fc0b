"""The incremental teacher-student protocol.

Step 0 trains M_0 on the base batch with the classification loss only.  Each
later step copies the frozen teacher into a student, grows the head by the
new batch size, trains on new-class data only, and promotes the student.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datastream import AccessLog, ClassSchedule, LabeledImageSet, augment, minibatches, probe_set
from .errors import ConfigurationError, NumericalFailure, ScheduleViolation
from .evaluation import (
    ProbeReference,
    StepMetrics,
    evaluate_step,
    make_probe_reference,
    retention_divergence,
)
from .gradcam import attention_distillation_loss, cam_from_features
from .losses import (
    ExperimentId,
    LossWeights,
    classification_loss,
    combined_loss,
    distillation_loss,
    top_base_class,
)
from .netcore import (
    ModelSnapshot,
    MomentumSGD,
    NetworkModel,
    extend_head,
    forward,
    grad,
    load_checkpoint,
    resolve_dtype,
    save_checkpoint,
    set_deterministic,
    small_convnet,
    snapshot,
)

log = logging.getLogger(__name__)


def derive_seed(seed, *keys) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass
class Counters:
    """Instrumentation for the experiment-ID semantics."""

    teacher_forwards: int = 0
    distillation_evals: int = 0
    attention_evals: int = 0
    optimizer_steps: int = 0


@dataclass
class EpochRecord:
    step: int
    epoch: int
    L_C: float
    L_D: float
    L_AD: float
    L_total: float


@dataclass
class InitCheck:
    """Penalty values on the first minibatch of a step, before any update."""

    step: int
    l_ad: float
    l_d: float
    l_d_floor: float
    l_d_grad_max: float
    logit_gap: float


@dataclass
class IncrementalState:
    step: int
    teacher: ModelSnapshot
    seen: list
    history: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)
    log: AccessLog = field(default_factory=AccessLog)
    reference: ProbeReference | None = None
    init_checks: list = field(default_factory=list)
    teacher_hashes: list = field(default_factory=list)
    student: NetworkModel | None = None
    probe_maps: np.ndarray | None = None

    @property
    def n_known(self) -> int:
        return len(self.seen)


def build_model(config, n_classes, input_shape, seed) -> NetworkModel:
    m = config.model
    arch = small_convnet(n_classes, input_shape[0], input_shape[1], tuple(m.channels), m.kernel, m.pool,
                         m.head_pool)
    return NetworkModel.initialize(arch, input_shape, m.tap_layer, seed, config.training.precision)


def _label_map(seen, n_dataset_classes) -> np.ndarray:
    table = np.full(n_dataset_classes, -1, dtype=np.int64)
    table[np.asarray(seen, dtype=np.int64)] = np.arange(len(seen))
    return table


def _batches(data, classes, config, seed, log, step, epoch):
    dtype = resolve_dtype(config.training.precision)
    rng = np.random.default_rng(derive_seed(seed, 7, epoch))
    for x, y, idx in minibatches(data, classes, config.training.minibatch, seed, log, step, epoch, dtype,
                                 with_index=True):
        if config.dataset.flip or config.dataset.crop_pad:
            x = augment(x, rng, config.dataset.flip, config.dataset.crop_pad)
        yield x, y, idx


def train_initial_teacher(train: LabeledImageSet, base_classes, config, seed=0, log: AccessLog | None = None,
                          epochs_out: list | None = None, counters: Counters | None = None) -> ModelSnapshot:
    """Train M_0 on the base classes with L_C alone and freeze it."""
    base_classes = [int(c) for c in base_classes]
    if not base_classes or not np.isin(train.labels, base_classes).any():
        raise ConfigurationError("base batch has no training data")
    model = build_model(config, len(base_classes), train.image_shape, derive_seed(seed, 0, 1))
    table = _label_map(base_classes, train.n_classes)
    opt = MomentumSGD(config.training.lr, config.training.momentum, config.training.weight_decay)
    batch_seed = derive_seed(seed, 0, 2)
    epoch = 0
    try:
        for epoch in range(config.training.base_epochs):
            totals, n = 0.0, 0
            for x, y, _ in _batches(train, base_classes, config, batch_seed, log, 0, epoch):
                logits, _ = forward(model, x)
                loss = classification_loss(logits, torch.from_numpy(table[y.numpy()]))
                if not torch.isfinite(loss):
                    raise NumericalFailure("non-finite loss")
                opt.step(model, grad(loss, model))
                if counters is not None:
                    counters.optimizer_steps += 1
                totals += float(loss.detach()) * len(y)
                n += len(y)
            if epochs_out is not None:
                epochs_out.append(EpochRecord(0, epoch, totals / n, math.nan, math.nan, totals / n))
    except NumericalFailure as exc:
        raise _with_context(exc, 0, epoch) from None
    return snapshot(model)


def _with_context(exc: NumericalFailure, step, epoch) -> NumericalFailure:
    if "step" in exc.context:
        return exc
    return NumericalFailure(exc.message, step=step, epoch=epoch, **exc.context)


class _TeacherCache:
    """Per-step memo of teacher logits and Grad-CAM maps, keyed by training-set index.

    Valid only because the teacher is frozen for the whole step.
    """

    def __init__(self):
        self.logits = {}
        self.maps = {}

    def lookup(self, idx, b=None):
        keys = idx.tolist()
        if not all(i in self.logits for i in keys):
            return None
        logits = torch.stack([self.logits[i] for i in keys])
        if b is None:
            return logits, None
        pairs = list(zip(keys, b.tolist()))
        if not all(p in self.maps for p in pairs):
            return None
        return logits, torch.stack([self.maps[p] for p in pairs])

    def store(self, idx, logits, b=None, maps=None):
        for j, i in enumerate(idx.tolist()):
            self.logits[i] = logits[j].detach()
            if maps is not None:
                self.maps[(i, int(b[j]))] = maps[j].detach()


def incremental_step(state: IncrementalState, train: LabeledImageSet, new_classes, config,
                     experiment_id, seed=0) -> IncrementalState:
    """Learn ``new_classes`` from their data only, guided by the frozen teacher."""
    new_classes = [int(c) for c in new_classes]
    if set(new_classes) & set(state.seen):
        raise ScheduleViolation(f"classes {sorted(set(new_classes) & set(state.seen))} were already learned")
    if not new_classes:
        raise ScheduleViolation("empty class batch")
    eid = ExperimentId.parse(experiment_id)
    weights = LossWeights(config.losses.beta, config.losses.gamma, eid)
    lc, ls = config.training, config.losses
    t = state.step + 1
    teacher = state.teacher
    n_base, k = teacher.head_size, len(new_classes)
    hash_before = teacher.parameter_hash()

    student = extend_head(teacher.to_student(), k, lc.head_init_scale, derive_seed(seed, t, 1))
    state.student = student
    seen = list(state.seen) + new_classes
    table = _label_map(seen, train.n_classes)
    new_cols = list(range(n_base, n_base + k))
    opt = MomentumSGD(lc.lr, lc.momentum, lc.weight_decay)
    batch_seed = derive_seed(seed, t, 2)
    counters = state.counters
    cache = _TeacherCache() if lc.teacher_cache else None
    first = True

    epoch = 0
    try:
        for epoch in range(lc.epochs):
            sums = {"L_C": 0.0, "L_D": 0.0, "L_AD": 0.0, "L_total": 0.0}
            n = 0
            for x, y, idx in _batches(train, new_classes, config, batch_seed, state.log, t, epoch):
                y_head = torch.from_numpy(table[y.numpy()])
                logits_s, feats_s = forward(student, x)
                l_c = classification_loss(logits_s, y_head, ls.lc_head_mode, new_cols)
                l_d = l_ad = None
                logits_t = feats_t = q_t = None
                if eid.uses_distillation or eid.uses_attention:
                    b = None
                    if eid.uses_attention and ls.b_source == "student":
                        b = top_base_class(logits_s, n_base)
                    hit = cache.lookup(idx, b) if cache is not None else None
                    if hit is not None and eid.uses_attention and hit[1] is None:
                        hit = None
                    if hit is None:
                        with torch.enable_grad():
                            logits_t, feats_t = forward(teacher, x)
                        counters.teacher_forwards += 1
                    else:
                        logits_t, q_t = hit
                if eid.uses_distillation:
                    l_d = distillation_loss(logits_t, logits_s, ls.distillation_form)
                    counters.distillation_evals += 1
                if eid.uses_attention:
                    if b is None:
                        b = top_base_class(logits_t, n_base)
                    if q_t is None:
                        q_t, _ = cam_from_features(logits_t, feats_t, b, higher_order=False)
                    q_s, _ = cam_from_features(logits_s, feats_s, b, higher_order=True)
                    l_ad = attention_distillation_loss(q_t, q_s, ls.eps, ls.ad_distance)
                    counters.attention_evals += 1
                if cache is not None and feats_t is not None:
                    cache.store(idx, logits_t, b, q_t)
                if first and eid.uses_distillation:
                    state.init_checks.append(_init_check(t, logits_t, logits_s, l_ad, ls.distillation_form))
                first = False
                total = combined_loss(l_c, l_d, l_ad, weights)
                opt.step(student, grad(total, student))
                counters.optimizer_steps += 1
                bs = len(y)
                n += bs
                sums["L_C"] += float(l_c.detach()) * bs
                sums["L_D"] += (float(l_d.detach()) if l_d is not None else math.nan) * bs
                sums["L_AD"] += (float(l_ad.detach()) if l_ad is not None else math.nan) * bs
                sums["L_total"] += float(total.detach()) * bs
            state.epochs.append(EpochRecord(t, epoch, *(sums[c] / n for c in ("L_C", "L_D", "L_AD", "L_total"))))
            log.debug("step %d epoch %d %s", t, epoch, {c: sums[c] / n for c in sums})
    except NumericalFailure as exc:
        raise _with_context(exc, t, epoch) from None

    hash_after = teacher.parameter_hash()
    state.teacher_hashes.append((t, hash_before, hash_after))
    if hash_before != hash_after:
        raise RuntimeError(f"teacher parameters changed during step {t}")
    state.teacher = snapshot(student)
    state.student = None
    state.seen = seen
    state.step = t
    return state


def _init_check(t, logits_t, logits_s, l_ad, form) -> InitCheck:
    n = logits_t.shape[1]
    base = logits_s[:, :n]
    l_d = distillation_loss(logits_t, base, form)
    (g,) = torch.autograd.grad(l_d, logits_s, retain_graph=True)
    floor = distillation_loss(logits_t, logits_t.detach(), form)
    return InitCheck(
        step=t,
        l_ad=float(l_ad.detach()) if l_ad is not None else 0.0,
        l_d=float(l_d.detach()),
        l_d_floor=float(floor.detach()),
        l_d_grad_max=float(g[:, :n].abs().max()),
        logit_gap=float((base - logits_t).detach().abs().max()),
    )


def _evaluate(state, test, schedule, t, config) -> StepMetrics:
    dtype = resolve_dtype(config.training.precision)
    seen = state.seen
    mask = np.isin(test.labels, seen)
    idx = np.flatnonzero(mask)
    state.log.record(t, "test", test.labels[idx])
    table = _label_map(seen, test.n_classes)
    images = test.images(idx, dtype)
    att = math.nan
    if state.reference is not None:
        probe = test.images(state.reference.indices, dtype)
        att, state.probe_maps = retention_divergence(state.teacher, probe, state.reference)
    return evaluate_step(state.teacher, images, table[test.labels[idx]], schedule.known_before(t), t, att)


@dataclass
class RunResult:
    state: IncrementalState
    complete: bool

    @property
    def history(self):
        return self.state.history

    @property
    def final_model(self) -> ModelSnapshot:
        return self.state.teacher


def run_schedule(train: LabeledImageSet, test: LabeledImageSet, schedule: ClassSchedule, config,
                 experiment_id, seed=0, state: IncrementalState | None = None, stop_after=None,
                 on_step=None) -> RunResult:
    """Train M_0, then every incremental batch, evaluating after each step.

    Pass a ``state`` restored from a checkpoint to continue a run;
    ``stop_after`` halts once that step is evaluated.  ``on_step(state)``
    fires after each evaluated step.
    """
    if config.training.deterministic:
        set_deterministic(True)
    for b in schedule.batches:
        if not np.isin(train.labels, b).any():
            raise ConfigurationError(f"no training data for classes {b}")
    if state is None:
        counters = Counters()
        access = AccessLog()
        epochs: list = []
        m0 = train_initial_teacher(train, schedule.batches[0], config, seed, access, epochs, counters)
        state = IncrementalState(0, m0, list(schedule.batches[0]), epochs=epochs, counters=counters, log=access)
        dtype = resolve_dtype(config.training.precision)
        idx = probe_set(test, schedule.batches[0], config.eval.probe_per_class, derive_seed(seed, 0, 3))
        labels = _label_map(state.seen, test.n_classes)[test.labels[idx]]
        state.reference = make_probe_reference(m0, test.images(idx, dtype), labels, idx,
                                               config.eval.retention_class)
        state.history.append(_evaluate(state, test, schedule, 0, config))
        if on_step:
            on_step(state)
    while state.step + 1 < len(schedule):
        if stop_after is not None and state.step >= stop_after:
            return RunResult(state, False)
        t = state.step + 1
        incremental_step(state, train, schedule.batches[t], config, experiment_id, seed)
        state.history.append(_evaluate(state, test, schedule, t, config))
        if on_step:
            on_step(state)
    return RunResult(state, True)


# ----------------------------------------------------------------- persistence


def save_state(path, state: IncrementalState, config_digest="", extra=None) -> None:
    payload = {
        "step": state.step,
        "config_digest": config_digest,
        "history": [{k: v for k, v in asdict(m).items() if k != "epoch_traces"} for m in state.history],
        "epochs": [asdict(e) for e in state.epochs],
        "counters": asdict(state.counters),
        "access_log": [list(r) for r in state.log.records],
        "reference": state.reference.to_dict() if state.reference is not None else None,
        "init_checks": [asdict(c) for c in state.init_checks],
        "teacher_hashes": [list(h) for h in state.teacher_hashes],
    }
    payload.update(extra or {})
    # seeds are derived from (run seed, step), so the step index is the whole RNG state
    save_checkpoint(path, state.teacher, state.seen, rng_state={"scheme": "seedsequence", "step": state.step},
                    extra=_jsonable(payload))


def load_state(path) -> tuple[IncrementalState, dict]:
    ckpt = load_checkpoint(path)
    x = ckpt.extra
    access = AccessLog()
    access.extend(x["access_log"])
    state = IncrementalState(
        step=x["step"],
        teacher=snapshot(ckpt.model),
        seen=list(ckpt.class_labels),
        history=[StepMetrics(**h) for h in x["history"]],
        epochs=[EpochRecord(**e) for e in x["epochs"]],
        counters=Counters(**x["counters"]),
        log=access,
        reference=ProbeReference.from_dict(x["reference"]) if x["reference"] else None,
        init_checks=[InitCheck(**c) for c in x["init_checks"]],
        teacher_hashes=[tuple(h) for h in x["teacher_hashes"]],
    )
    return state, x


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return _jsonable(float(obj))
    return obj
