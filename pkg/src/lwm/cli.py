"""Command line entry point.

    lwm run --config desk.cfg [--seed N] [--out DIR] [--dry-run] [--deterministic] [--jobs N]
            [--stop-after T]
    lwm resume CHECKPOINT --config desk.cfg
    lwm plot RUN_DIR [RUN_DIR ...] [--out DIR]
    lwm validate --config desk.cfg

The output root defaults to ``$LWM_OUT`` (else ``runs``).  Each run writes
``<root>/<name>/<experiment_id>/<seed>/`` with:

    steps.csv    step, n_seen, top1, top5, base_top1, new_top1, att_div
                 (one row per evaluated step; att_div is the mean probe-map
                 divergence from M_0, base_top1 is nan at step 0)
    epochs.csv   step, epoch, L_C, L_D, L_AD, L_total (epoch means)
    ckpt/step_<t>.npz, att/step_<t>.pgm + .npy, resolved.cfg, summary.json

``run`` also writes a comparison chart under ``<root>/<name>/plots``.

Exit codes: 0 ok, 2 configuration or input format error, 3 numerical
failure, 4 checkpoint version mismatch.
"""
from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import load_config
from .errors import CheckpointVersionError, ConfigurationError, FormatError, NumericalFailure
from .report import plot
from .runner import execute_run, make_schedule, output_root, resume_run

log = logging.getLogger("lwm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERSION = 0, 2, 3, 4


def _config(args):
    config = load_config(args.config)
    if getattr(args, "deterministic", False):
        config.training.deterministic = True
    if getattr(args, "seed", None) is not None:
        config.experiment.seeds = (args.seed,)
    return config


def _describe(config) -> str:
    schedule = make_schedule(config)
    lines = [f"experiment {config.experiment.name}: ids={list(config.experiment.ids)} "
             f"seeds={list(config.experiment.seeds)}"]
    known = 0
    for t, batch in enumerate(schedule.batches):
        known += len(batch)
        lines.append(f"  step {t}: classes {list(batch)} -> head size {known}")
    return "\n".join(lines)


def _job(payload):
    config, eid, seed, root, stop_after = payload
    return str(execute_run(config, eid, seed, root, stop_after=stop_after))


def cmd_run(args) -> int:
    config = _config(args)
    if args.dry_run:
        print(config.to_text())
        print(_describe(config))
        return EXIT_OK
    root = output_root(config, args.out)
    jobs = [(config, eid.value, seed, root, args.stop_after)
            for eid in config.experiment_ids for seed in config.experiment.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            dirs = list(pool.map(_job, jobs))
    else:
        dirs = [_job(j) for j in jobs]
    for d in dirs:
        print(d)
    if args.stop_after is None:
        plot(dirs, Path(root) / config.experiment.name / "plots")
    return EXIT_OK


def cmd_resume(args) -> int:
    config = _config(args)
    directory, worked = resume_run(args.checkpoint, config)
    print(f"{directory}: {'resumed' if worked else 'already complete'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = args.out or Path(args.run_dirs[0]).parent.parent / "plots"
    for f in plot(args.run_dirs, out):
        print(f)
    return EXIT_OK


def cmd_validate(args) -> int:
    config = _config(args)
    print(_describe(config))
    for eid in config.experiment_ids:
        beta, gamma = config.loss_weights(eid).effective
        print(f"  {eid.value}: beta={beta} gamma={gamma}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lwm", description="Class-incremental training with attention distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="train every (experiment id, seed) pair in a config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--dry-run", action="store_true")
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--stop-after", type=int, help="halt after evaluating this step (for interrupt tests)")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("resume", help="continue a run from a step checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_resume)

    pl = sub.add_parser("plot", help="accuracy curves and attention grids from run directories")
    pl.add_argument("run_dirs", nargs="+")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    v = sub.add_parser("validate", help="check a config and print its schedule")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointVersionError as exc:
        print(f"checkpoint version: {exc}", file=sys.stderr)
        return EXIT_VERSION


if __name__ == "__main__":
    sys.exit(main())
