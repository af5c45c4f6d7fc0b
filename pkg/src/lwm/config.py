"""Typed, sectioned experiment configuration (INI syntax, strict keys).

Every key has a default.  Unknown sections or keys raise
ConfigurationError naming the offending ``section.key``.

    [experiment]  name, ids, seeds, out
    [dataset]     source (synth|cifar10|cifar100|folder), path, n_classes,
                  train_per_class, test_per_class, image_size, distractors, shapes,
                  data_seed,
                  standardize, flip, crop_pad, train_fraction
    [schedule]    base_size, batch_size, seed
    [training]    lr, momentum, weight_decay, epochs, base_epochs, minibatch,
                  precision, deterministic, init_scale, teacher_cache
    [losses]      beta, gamma, eps, distillation_form, lc_head_mode,
                  b_source, ad_distance
    [model]       arch, channels, kernel, pool, head_pool, tap_layer
    [eval]        probe_per_class, retention_class
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .errors import ConfigurationError
from .losses import ExperimentId, LossWeights


@dataclass
class ExperimentSection:
    name: str = "desk"
    ids: tuple = ("Finetuning", "LwF-MC", "LwM")
    seeds: tuple = (0, 1, 2)
    out: str = ""


@dataclass
class DatasetSection:
    source: str = "synth"
    path: str = ""
    n_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 16
    distractors: int = 0
    shapes: int = 12
    data_seed: int = 0
    standardize: bool = False
    flip: bool = False
    crop_pad: int = 0
    train_fraction: float = 0.8


@dataclass
class ScheduleSection:
    base_size: int = 4
    batch_size: int = 2
    seed: int = 0


@dataclass
class TrainingSection:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    base_epochs: int = 10
    minibatch: int = 32
    precision: str = "float64"
    deterministic: bool = True
    init_scale: str = "auto"
    teacher_cache: bool = False

    @property
    def head_init_scale(self):
        return None if self.init_scale == "auto" else float(self.init_scale)


@dataclass
class LossSection:
    beta: float = 1.0
    gamma: float = 1.0
    eps: float = 1e-8
    distillation_form: str = "full-bce"
    lc_head_mode: str = "full"
    b_source: str = "student"
    ad_distance: str = "l1"


@dataclass
class ModelSection:
    arch: str = "small_convnet"
    channels: tuple = (16, 32)
    kernel: int = 3
    pool: str = "max"
    head_pool: str = "max"
    tap_layer: str = "conv2"


@dataclass
class EvalSection:
    probe_per_class: int = 8
    retention_class: str = "teacher"


_CHOICES = {
    ("dataset", "source"): ("synth", "cifar10", "cifar100", "folder"),
    ("training", "precision"): ("float64", "float32"),
    ("losses", "distillation_form"): ("full-bce", "positive-only"),
    ("losses", "lc_head_mode"): ("full", "new"),
    ("losses", "b_source"): ("student", "teacher"),
    ("losses", "ad_distance"): ("l1", "l2"),
    ("model", "arch"): ("small_convnet",),
    ("model", "pool"): ("max", "avg"),
    ("model", "head_pool"): ("gap", "max"),
    ("eval", "retention_class"): ("teacher", "label"),
}

_INT_TUPLES = {("experiment", "seeds"), ("model", "channels")}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    losses: LossSection = field(default_factory=LossSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    @property
    def experiment_ids(self) -> list[ExperimentId]:
        return [ExperimentId.parse(i) for i in self.experiment.ids]

    def loss_weights(self, experiment_id) -> LossWeights:
        return LossWeights(self.losses.beta, self.losses.gamma, experiment_id)

    def sections(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]

    def validate(self) -> None:
        for sname, sec in self.sections():
            for key, choices in ((k[1], v) for k, v in _CHOICES.items() if k[0] == sname):
                if getattr(sec, key) not in choices:
                    raise ConfigurationError(f"{sname}.{key}: {getattr(sec, key)!r} not in {choices}")
        self.experiment_ids  # raises on unknown ids
        if not self.experiment.seeds:
            raise ConfigurationError("experiment.seeds: need at least one seed")
        t = self.training
        if t.lr <= 0:
            raise ConfigurationError("training.lr: must be positive")
        if not 0 <= t.momentum < 1:
            raise ConfigurationError("training.momentum: must be in [0, 1)")
        if t.epochs < 0 or t.base_epochs < 0:
            raise ConfigurationError("training.epochs: must be nonnegative")
        if t.minibatch < 1:
            raise ConfigurationError("training.minibatch: must be positive")
        if t.init_scale != "auto":
            try:
                if float(t.init_scale) < 0:
                    raise ValueError
            except ValueError:
                raise ConfigurationError("training.init_scale: 'auto' or a nonnegative number") from None
        if self.losses.beta < 0 or self.losses.gamma < 0:
            raise ConfigurationError("losses.beta/gamma: must be nonnegative")
        if self.losses.eps < 0:
            raise ConfigurationError("losses.eps: must be nonnegative")
        if len(self.model.channels) != 2:
            raise ConfigurationError("model.channels: small_convnet takes two conv widths")
        if self.schedule.base_size < 1 or self.schedule.batch_size < 1:
            raise ConfigurationError("schedule.base_size/batch_size: must be positive")
        if self.dataset.image_size % 4:
            raise ConfigurationError("dataset.image_size: must be divisible by 4")

    # ---------------------------------------------------------------- text I/O

    def to_text(self) -> str:
        lines = []
        for sname, sec in self.sections():
            lines.append(f"[{sname}]")
            for f in dataclasses.fields(sec):
                lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self, exclude=(("experiment", "ids"), ("experiment", "seeds"), ("experiment", "out"))) -> str:
        """Hash of the resolved config, ignoring keys that only select which runs to do."""
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(self.to_text())
        for sname, key in exclude:
            parser.remove_option(sname, key)
        buf = io.StringIO()
        parser.write(buf)
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted overrides, e.g. ``replace(**{"losses.beta": 2.0})``."""
        cfg = parse_config(self.to_text())
        for dotted, value in changes.items():
            sname, key = dotted.split(".")
            setattr(getattr(cfg, sname), key, value)
        cfg.validate()
        return cfg


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(sname, key, raw: str, default):
    try:
        if (sname, key) in _INT_TUPLES:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, tuple):
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except (KeyError, ValueError):
        raise ConfigurationError(f"{sname}.{key}: cannot read {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"config syntax: {exc}") from None
    sections = {}
    known = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for sname in parser.sections():
        if sname not in known:
            raise ConfigurationError(f"{sname}: unknown section")
    for sname, f in known.items():
        sec = f.default_factory()
        if parser.has_section(sname):
            names = {g.name for g in dataclasses.fields(sec)}
            for key, raw in parser.items(sname):
                if key not in names:
                    raise ConfigurationError(f"{sname}.{key}: unknown key")
                setattr(sec, key, _convert(sname, key, raw, getattr(sec, key)))
        sections[sname] = sec
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
