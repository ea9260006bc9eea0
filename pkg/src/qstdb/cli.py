"""``qstdb`` command line.

Every subcommand writes one fresh run directory under ``--out`` and prints its
path on stdout. Failures print a single machine-parsable line on stderr::

    error kind=ConfigurationError message="..."

followed by a human-readable hint, and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from qstdb import pipeline
from qstdb.config import RunConfig, config_from_dict, load_config
from qstdb.errors import ConfigurationError, InputError, QstdbError

EXIT_CODES = {ConfigurationError: 2, InputError: 3}

HINTS = {
    ConfigurationError: "check the config file and the checkpoint kind expected by this command",
    InputError: "check that the referenced files exist and follow the documented formats",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (defaults are used for missing sections)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs", help="parent directory for run directories")
    common.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")

    p = argparse.ArgumentParser(prog="qstdb", description="Quantized spiking network training for hyperspectral patches")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    sub.add_parser("train-ann", parents=[common], help="train the source ANN")
    c = sub.add_parser("convert", parents=[common], help="convert an ANN checkpoint and calibrate thresholds")
    c.add_argument("checkpoint")
    t = sub.add_parser("train-snn", parents=[common], help="Q-STDB training of a converted SNN")
    t.add_argument("checkpoint")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("checkpoint")
    e.add_argument("--mode", choices=("ann", "snn"), default="snn")
    e.add_argument("--timesteps", type=int)
    pr = sub.add_parser("profile", parents=[common], help="measure per-layer spiking activity")
    pr.add_argument("checkpoint")
    en = sub.add_parser("energy", parents=[common], help="FLOPs and energy report from an activity profile")
    en.add_argument("checkpoint")
    en.add_argument("profile")
    en.add_argument("--ann-bits", type=int)
    en.add_argument("--snn-bits", type=int)
    sub.add_parser("run", parents=[common], help="full pipeline: train-ann, convert, train-snn, profile, energy")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "ann_bits", None) is not None:
        cfg.energy.ann_bits = args.ann_bits
    if getattr(args, "snn_bits", None) is not None:
        cfg.energy.snn_bits = args.snn_bits
    # round-trip through the validator so overrides are checked too
    return config_from_dict(cfg.to_dict())


def dispatch(args, cfg: RunConfig):
    cmd = args.command
    if cmd == "synth":
        return pipeline.cmd_synth(cfg, args.out)
    if cmd == "train-ann":
        return pipeline.cmd_train_ann(cfg, args.out)
    if cmd == "convert":
        return pipeline.cmd_convert(cfg, args.checkpoint, args.out)
    if cmd == "train-snn":
        return pipeline.cmd_train_snn(cfg, args.checkpoint, args.out)
    if cmd == "eval":
        return pipeline.cmd_eval(cfg, args.checkpoint, args.mode, args.out, args.timesteps)
    if cmd == "profile":
        return pipeline.cmd_profile(cfg, args.checkpoint, args.out)
    if cmd == "energy":
        return pipeline.cmd_energy(cfg, args.checkpoint, args.profile, args.out)
    return pipeline.cmd_run(cfg, args.out)


def report_error(exc: Exception) -> int:
    kind = type(exc).__name__
    print(f"error kind={kind} message={json.dumps(str(exc))}", file=sys.stderr)
    for cls, hint in HINTS.items():
        if isinstance(exc, cls):
            print(f"  hint: {hint}", file=sys.stderr)
            return EXIT_CODES[cls]
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        run = dispatch(args, cfg)
    except QstdbError as exc:
        return report_error(exc)
    except (ValueError, OSError) as exc:
        return report_error(InputError(str(exc)))
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
