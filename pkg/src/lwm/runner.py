"""Run directories: executing, checkpointing and resuming one (experiment, seed) run.

Layout: ``<root>/<name>/<experiment_id>/<seed>/`` holding ``steps.csv``,
``epochs.csv``, ``ckpt/step_<t>.npz``, ``att/step_<t>.{pgm,npy}``,
``resolved.cfg`` and ``summary.json``.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config, parse_config
from .datastream import load_cifar_binary, load_image_folder, split_classes, synth_shapes
from .errors import ConfigurationError
from .evaluation import EPOCH_COLUMNS, STEP_COLUMNS, write_csv
from .gradcam import attention_grid, write_pgm
from .losses import ExperimentId
from .protocol import load_state, run_schedule, save_state

log = logging.getLogger(__name__)

OUT_ENV = "LWM_OUT"


def output_root(config: ExperimentConfig, override=None) -> Path:
    return Path(override or config.experiment.out or os.environ.get(OUT_ENV) or "runs")


def run_dir(root, config, experiment_id, seed) -> Path:
    return Path(root) / config.experiment.name / ExperimentId.parse(experiment_id).value / str(seed)


def load_data(config: ExperimentConfig):
    """Build (train, test) per the dataset section."""
    d = config.dataset
    if d.source == "synth":
        kw = dict(distractors=d.distractors, n_shapes=d.shapes)
        train = synth_shapes(d.n_classes, d.train_per_class, d.image_size, d.data_seed, "train", **kw)
        test = synth_shapes(d.n_classes, d.test_per_class, d.image_size, d.data_seed, "test", **kw)
    elif d.source in ("cifar10", "cifar100"):
        root = Path(d.path)
        if d.source == "cifar100":
            train_files, test_files = [root / "train.bin"], [root / "test.bin"]
        else:
            train_files = sorted(root.glob("data_batch_*.bin"))
            test_files = [root / "test_batch.bin"]
        for f in train_files + test_files:
            if not Path(f).exists():
                raise ConfigurationError(f"dataset.path: missing {f}")
        train = load_cifar_binary(train_files, d.source, "train")
        test = load_cifar_binary(test_files, d.source, "test")
    else:
        train, test, _ = load_image_folder(d.path, d.image_size, d.data_seed, d.train_fraction)
    if d.standardize:
        mean, std = train.channel_stats()
        train.set_standardization(mean, std)
        test.set_standardization(mean, std)
    return train, test


_KNOWN_CLASSES = {"cifar10": 10, "cifar100": 100}


def make_schedule(config, train=None):
    """Class schedule for the config; ``train`` is only needed for folder datasets."""
    s = config.schedule
    source = config.dataset.source
    if source == "synth":
        n = config.dataset.n_classes
    elif source in _KNOWN_CLASSES:
        n = _KNOWN_CLASSES[source]
    else:
        n = (train or load_data(config)[0]).n_classes
    return split_classes(range(n), s.batch_size, s.seed, s.base_size)


def _write_outputs(directory: Path, state):
    write_csv(directory / "steps.csv", [m.row() for m in state.history], STEP_COLUMNS)
    write_csv(directory / "epochs.csv", [asdict(e) for e in state.epochs], EPOCH_COLUMNS)
    if state.probe_maps is not None:
        att = directory / "att"
        att.mkdir(exist_ok=True)
        np.save(att / f"step_{state.step}.npy", state.probe_maps)
        write_pgm(att / f"step_{state.step}.pgm", attention_grid(list(state.probe_maps)))


def execute_run(config: ExperimentConfig, experiment_id, seed, root, stop_after=None, data=None) -> Path:
    """Run the protocol for one (experiment, seed) pair and write its run directory."""
    eid = ExperimentId.parse(experiment_id)
    directory = run_dir(root, config, eid, seed)
    (directory / "ckpt").mkdir(parents=True, exist_ok=True)
    (directory / "resolved.cfg").write_text(config.to_text())
    train, test = data or load_data(config)
    schedule = make_schedule(config, train)
    digest = config.digest()
    meta = {"experiment_id": eid.value, "seed": int(seed), "n_steps": len(schedule),
            "schedule": schedule.to_dict()}

    def on_step(state):
        _write_outputs(directory, state)
        save_state(directory / "ckpt" / f"step_{state.step}.npz", state, digest, meta)

    result = run_schedule(train, test, schedule, config, eid, seed, stop_after=stop_after, on_step=on_step)
    if result.complete:
        _write_summary(directory, result.state, schedule, meta)
    return directory


def _write_summary(directory, state, schedule, meta):
    last = state.history[-1]
    summary = dict(meta, final=last.row(), counters=asdict(state.counters),
                   train_access_violations=len(state.log.train_violations(schedule)))
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")


def resume_run(checkpoint_path, config: ExperimentConfig) -> tuple[Path, bool]:
    """Continue a run from a step checkpoint.

    Returns the run directory and whether any work was done.  A config
    whose digest differs from the one recorded in the checkpoint is refused.
    """
    checkpoint_path = Path(checkpoint_path)
    state, extra = load_state(checkpoint_path)
    if extra.get("config_digest") != config.digest():
        raise ConfigurationError("config hash mismatch: the checkpoint was produced under a different config")
    directory = checkpoint_path.parent.parent
    if state.step + 1 >= extra["n_steps"]:
        return directory, False
    train, test = load_data(config)
    schedule = make_schedule(config, train)
    if schedule.to_dict() != extra["schedule"]:
        raise ConfigurationError("schedule differs from the checkpointed run")
    digest = config.digest()
    meta = {k: extra[k] for k in ("experiment_id", "seed", "n_steps", "schedule")}

    def on_step(st):
        _write_outputs(directory, st)
        save_state(directory / "ckpt" / f"step_{st.step}.npz", st, digest, meta)

    result = run_schedule(train, test, schedule, config, extra["experiment_id"], extra["seed"],
                          state=state, on_step=on_step)
    if result.complete:
        _write_summary(directory, result.state, schedule, meta)
    return directory, True


def resolved_config(directory) -> ExperimentConfig:
    return parse_config((Path(directory) / "resolved.cfg").read_text())


__all__ = ["execute_run", "resume_run", "load_data", "make_schedule", "output_root", "run_dir",
           "load_config", "resolved_config"]
