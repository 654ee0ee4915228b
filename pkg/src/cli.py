#!/usr/bin/env python3
import argparse
import logging
import sys
from pathlib import Path

from config import RunConfig, build_config, load_config_file
from errors import FlexMeshError
from main import cmd_animate, cmd_fit_rest, cmd_metrics, cmd_pfode_demo, run

VERSION = "0.1.0"

# (flag, type, help) for RunConfig overrides, shared by every subcommand
_RUN_FLAGS = [
    ("mesh", str, "mesh JSON file"),
    ("image", str, "input PNG"),
    ("prompt", str, "condition passed to the oracle"),
    ("frames", int, "frame count N"),
    ("steps", int, "optimizer steps"),
    ("lr", float, "Adam learning rate, in pixels of the reference canvas"),
    ("guidance-scale", float, "classifier-free guidance scale"),
    ("loss-weight", float, "flow-matching loss weight"),
    ("constraint-weight", float, "keypoint constraint weight"),
    ("window", int, "temporal attention window"),
    ("oracle", str, "gaussian | teacher:<trajectory.json> | remote:<url>"),
    ("seed", int, "random seed (falls back to FLEXMESH_SEED)"),
    ("out-dir", str, "output directory"),
    ("render-size", int, "oracle frame resolution"),
    ("motion-scale", float, "scale of the trajectory offsets"),
    ("rest-iterations", int, "rest-fit iterations"),
    ("rest-step", float, "rest-fit step size"),
    ("rest-checkpoint", str, "rest Jacobian checkpoint path"),
    ("fps", float, "GIF frame rate"),
    ("sds-samples", int, "Monte-Carlo samples per gradient"),
    ("t-min", float, "lowest sampled noise level, as a fraction of T"),
    ("t-max", float, "highest sampled noise level, as a fraction of T"),
    ("flow-t-min", float, "lowest noise level for the flow score term"),
    ("timeout", float, "remote denoiser timeout in seconds"),
    ("retries", int, "remote denoiser attempts"),
    ("workers", int, "frame worker threads"),
    ("particles", int, "pfODE particle count"),
    ("pfode-steps", int, "pfODE Euler steps"),
    ("pfode-rates", str, "diagonal of C(t) = rates * t, comma-separated"),
    ("fault-injection", float, "scale dC/dt in the simulated dynamics"),
]


def _add_run_flags(parser):
    parser.add_argument("--config", type=Path, help="flat key = value config file")
    for flag, kind, text in _RUN_FLAGS:
        parser.add_argument(f"--{flag}", type=kind, default=None, help=text)
    parser.add_argument("--no-temporal", dest="use_temporal", action="store_const", const=False,
                        default=None, help="disable temporal Jacobians (spatial posing only)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flexmesh",
        description="Mesh-deformation clip animation with score guidance"
    )
    parser.add_argument("--version", action="version", version=f"flexmesh {VERSION}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")

    subparsers = parser.add_subparsers(dest="command", required=True)

    # === flexmesh fit-rest ===
    _add_run_flags(subparsers.add_parser("fit-rest", help="Fit rest Jacobians J_0"))

    # === flexmesh animate ===
    _add_run_flags(subparsers.add_parser("animate", help="Optimize and render an animation"))

    # === flexmesh metrics <record> ===
    metrics_parser = subparsers.add_parser("metrics", help="DS / AE of a motion record")
    metrics_parser.add_argument("record", type=Path, help="motion JSON with a 'positions' array")
    metrics_parser.add_argument("--output", type=Path, help="CSV path (default: metrics.csv beside the record)")

    # === flexmesh pfode-demo ===
    _add_run_flags(subparsers.add_parser("pfode-demo", help="SDE vs pfODE covariance check"))

    # === flexmesh version ===
    subparsers.add_parser("version", help="Show version")
    return parser


def _config_from_args(args) -> RunConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {flag.replace("-", "_"): getattr(args, flag.replace("-", "_")) for flag, _, _ in _RUN_FLAGS}
    overrides["use_temporal"] = args.use_temporal
    return build_config(file_values, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    progress = not args.quiet

    # === Command handling ===
    if args.command == "version":
        print(f"flexmesh v{VERSION}")
        return 0

    if args.command == "metrics":
        return run(cmd_metrics, args.record, args.output)

    try:
        config = _config_from_args(args)
    except FlexMeshError as e:
        print(e.render(color=sys.stderr.isatty()), file=sys.stderr)
        return e.exit_code

    if args.command == "fit-rest":
        return run(cmd_fit_rest, config, progress=progress)
    elif args.command == "animate":
        return run(cmd_animate, config, progress=progress)
    elif args.command == "pfode-demo":
        return run(cmd_pfode_demo, config)


if __name__ == "__main__":
    sys.exit(main())
