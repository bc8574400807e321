"""`mmf` command-line tool: run the tracker, evaluate trajectories, export simulated data."""
import argparse
import logging
import sys
from typing import List, Optional

import numpy as np

from .core.config import load_pipeline_config, parse_overrides
from .core.errors import DegenerateCloud, MultiMotionError
from .core.logging_setup import setup_logging
from .models.report import MetricRow
from .services import evaluation, formats, pipeline, sim
from .services.model_manager import fit_grasp_frame

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmf", description="Multi-motion RGB-D tracking engine")
    parser.add_argument("--log-level", default=None, help="Overrides LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Track a simulated scene or a dataset")
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--sim", metavar="SCENE", help="Builtin scenario name or scene script file")
    source.add_argument("--dataset", metavar="DIR", help="Dataset directory (intrinsics.txt, associations.txt)")
    run.add_argument("--config", metavar="FILE", help="TOML config file")
    run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                     help="Config override such as crf.pairwise_weight=5 (repeatable)")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--mode", choices=["sparse+dense", "sparse", "dense"], default=None)
    run.add_argument("--out", metavar="DIR", default=None)

    ev = sub.add_parser("eval", help="Trajectory and reconstruction metrics")
    ev.add_argument("metric", choices=["ate", "rpe", "recon"])
    ev.add_argument("estimated")
    ev.add_argument("truth")
    ev.add_argument("--delta", type=float, default=1.0, help="RPE pose separation in seconds")

    sim_parser = sub.add_parser("sim", help="Simulator utilities")
    sim_sub = sim_parser.add_subparsers(dest="sim_command", required=True)
    export = sim_sub.add_parser("export", help="Write a scenario as a dataset directory")
    export.add_argument("scene", help="Builtin scenario name or scene script file")
    export.add_argument("out")
    export.add_argument("--seed", type=int, default=0)
    export.add_argument("--no-keypoints", action="store_true")
    sim_sub.add_parser("list", help="List builtin scenarios")

    inspect = sub.add_parser("inspect", help="Summarise a PLY model")
    inspect.add_argument("model")
    return parser


def _cmd_run(args) -> int:
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mode is not None:
        overrides["estimation_mode"] = args.mode
    if args.out is not None:
        overrides["output_dir"] = args.out
    config = load_pipeline_config(args.config, overrides)
    if args.sim:
        source = pipeline.open_simulation(config, sim.resolve_scene(args.sim))
    else:
        source = pipeline.open_dataset(config, args.dataset)
    summary = pipeline.run(config, source)
    for row in summary.metrics:
        print(row.csv())
    print(f"{summary.frames} frames, objects {[o.id for o in summary.objects]}, output in {summary.output_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    if args.metric == "recon":
        mean, std, _ = evaluation.reconstruction_error(formats.read_ply(args.estimated), formats.read_ply(args.truth))
        row = MetricRow(metric="recon_mean_m", value=mean, stddev=std)
    else:
        estimated, truth = formats.read_tum(args.estimated), formats.read_tum(args.truth)
        if args.metric == "ate":
            errors = evaluation.ate_errors(estimated, truth)
            row = MetricRow(metric="ate_rmse_m", value=float(np.sqrt(np.mean(errors**2))), stddev=float(errors.std()))
        else:
            translational, rotational = evaluation.rpe_rmse(estimated, truth, args.delta)
            print("metric,value,stddev")
            print(MetricRow(metric="rpe_trans_m_per_s", value=translational).csv())
            print(MetricRow(metric="rpe_rot_deg_per_s", value=rotational).csv())
            return EXIT_OK
    print("metric,value,stddev")
    print(row.csv())
    return EXIT_OK


def _cmd_sim(args) -> int:
    if args.sim_command == "list":
        for name, script in sim.builtin_scenarios().items():
            print(f"{name}: {script.frame_count} frames, {script.description}")
        return EXIT_OK
    script = sim.resolve_scene(args.scene)
    root = sim.export_dataset(script, args.out, seed=args.seed, keypoints=not args.no_keypoints)
    print(f"wrote {script.frame_count} frames of '{script.name}' to {root}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    cloud = formats.read_ply(args.model)
    print(f"points {len(cloud)}")
    if len(cloud):
        low, high = cloud.positions.min(axis=0), cloud.positions.max(axis=0)
        print(f"bounds min {np.round(low, 4).tolist()} max {np.round(high, 4).tolist()}")
        print(f"normals {int(cloud.has_normals().sum())}")
    try:
        grasp = fit_grasp_frame(cloud)
    except DegenerateCloud as e:
        print(f"grasp box: none ({e})")
        return EXIT_OK
    print(f"grasp box {formats.format_tum_line(0.0, grasp.pose)}")
    print(f"half extents {np.round(grasp.extents, 4).tolist()}")
    return EXIT_OK


_COMMANDS = {"run": _cmd_run, "eval": _cmd_eval, "sim": _cmd_sim, "inspect": _cmd_inspect}


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return _COMMANDS[args.command](args)
    except MultiMotionError as e:
        logger.error(str(e))
        print(f"mmf: error: {e}", file=sys.stderr)
        return EXIT_ERROR
    except ValueError as e:
        print(f"mmf: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
