"""Command line front end.

Subcommands: plan, estimate, navigate, compare, render, plot.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import List, Optional

import numpy as np

from . import baselines, dynamics as dyn, field as fld, geom, planner as plan_mod
from . import render as render_mod, sim, viz

COMPARE_FORMAT_VERSION = 1


class UsageError(ValueError):
    """Bad invocation; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2)
        raise UsageError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the master seed")
    parser.add_argument("--out-dir", default=".",
                        help="directory for output files")


def build_parser() -> _Parser:
    parser = _Parser(prog="fieldnav", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("plan", help="optimize a trajectory and write it out")
    p.add_argument("--config", required=True, help="run config JSON")
    _common_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("estimate", help="re-filter a logged run's controls")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--log", default=None, help="source run log (JSON lines)")
    _common_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("navigate", help="run a full episode")
    p.add_argument("--config", required=True, help="run config JSON")
    _common_flags(p)
    p.set_defaults(func=cmd_navigate)

    p = sub.add_parser("compare", help="run the planner comparison batch")
    p.add_argument("--config", required=True, help="comparison config JSON")
    _common_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="render one image from a pose")
    p.add_argument("--scene", required=True, help="scene JSON")
    p.add_argument("--pose", default="identity",
                   help='"identity" or "x,y,z[,yaw]"')
    p.add_argument("--samples", type=int, default=128, help="samples per ray")
    p.add_argument("--width", type=int, default=100)
    p.add_argument("--height", type=int, default=100)
    p.add_argument("--focal", type=float, default=100.0)
    p.add_argument("--name", default="render", help="output file stem")
    _common_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("plot", help="plot a run log or comparison report")
    p.add_argument("input", help="run log (.jsonl) or report (.json)")
    _common_flags(p)
    p.set_defaults(func=cmd_plot)

    return parser


def _prepare_out_dir(args) -> str:
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _load_config(args) -> sim.RunConfig:
    config = sim.load_run_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, master_seed=args.seed)
    return config


def parse_pose(text: str) -> geom.Pose:
    """"identity", "x,y,z", or "x,y,z,yaw" (yaw in radians)."""
    if text.strip() == "identity":
        return geom.Pose.identity()
    parts = text.split(",")
    if len(parts) not in (3, 4):
        raise UsageError(f"pose must be identity or x,y,z[,yaw], got {text!r}")
    try:
        values = [float(part) for part in parts]
    except ValueError as exc:
        raise UsageError(f"pose components must be numbers: {exc}") from None
    rotation = geom.rotz(values[3]) if len(values) == 4 else np.eye(3)
    return geom.Pose(rotation, np.array(values[:3]))


def cmd_plan(args) -> int:
    config = _load_config(args)
    out_dir = _prepare_out_dir(args)
    result = sim.initial_plan(config)
    plan_mod.save_plan(os.path.join(out_dir, "plan.json"), result)
    plan_mod.save_plan_csv(os.path.join(out_dir, "plan.csv"), result)
    print(f"wrote plan.json and plan.csv to {out_dir}")
    return 0


def cmd_estimate(args) -> int:
    config = _load_config(args)
    if args.log is not None:
        config = dataclasses.replace(config, replay_log=args.log)
    if config.replay_log is None:
        raise UsageError("estimate needs --log or a replay_log in the config")
    config = dataclasses.replace(config, mode="estimate-only")
    out_dir = _prepare_out_dir(args)
    log = sim.run_episode(config)
    path = os.path.join(out_dir, "replay.jsonl")
    sim.save_runlog(path, log)
    print(f"replayed {len(log.records)} steps -> {path}")
    return 0


def cmd_navigate(args) -> int:
    config = _load_config(args)
    if config.mode not in ("closed-loop", "open-loop"):
        raise UsageError(f"navigate needs a closed-loop or open-loop config, got mode={config.mode}")
    out_dir = _prepare_out_dir(args)
    log = sim.run_episode(config)
    path = os.path.join(out_dir, "runlog.jsonl")
    sim.save_runlog(path, log)
    print(f"status {log.status} after {len(log.records)} steps -> {path}")
    return 0


def load_comparison(path):
    """Comparison batch spec: scene, robot, planner/rrt configs, scenarios."""
    with open(path) as fh:
        payload = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(name: str) -> str:
        target = payload[name]
        return target if os.path.isabs(target) else os.path.join(base, target)

    scene = fld.load_scene(resolve("scene_path"))
    robot = dyn.load_robot(resolve("robot_path")) if "robot_path" in payload else dyn.RobotModel()
    config = baselines.ComparisonConfig(
        planner=plan_mod.PlannerConfig(**payload.get("planner", {})),
        rrt=baselines.RrtConfig(**payload.get("rrt", {})),
        collision_radius=payload.get("collision_radius", 0.3),
        rrt_threshold=payload.get("rrt_threshold"),
        tracking_speed=payload.get("tracking_speed", 1.0),
    )
    scenarios = [
        baselines.Scenario(
            name=entry["name"],
            start=np.asarray(entry["start"], dtype=float),
            goal=np.asarray(entry["goal"], dtype=float),
            start_yaw=entry.get("start_yaw", 0.0),
            seed=entry.get("seed", 0),
        )
        for entry in payload["scenarios"]
    ]
    return scene, robot, config, scenarios


def cmd_compare(args) -> int:
    scene, robot, config, scenarios = load_comparison(args.config)
    if args.seed is not None:
        scenarios = [dataclasses.replace(s, seed=args.seed) for s in scenarios]
    out_dir = _prepare_out_dir(args)
    body = dyn.make_body_model(robot)
    report = baselines.compare_planners(scenarios, scene, body, config, robot=robot)
    baselines.save_report(os.path.join(out_dir, "report.json"), report)
    baselines.save_report_csv(os.path.join(out_dir, "report.csv"), report)
    failures = sum(bool(row["failure"]) for row in report.rows)
    print(f"{len(report.rows)} rows ({failures} failures) -> {out_dir}")
    return 0


def cmd_render(args) -> int:
    scene = fld.load_scene(args.scene)
    pose = parse_pose(args.pose)
    camera = render_mod.Camera(
        width=args.width, height=args.height, fx=args.focal, fy=args.focal
    )
    seed = 0 if args.seed is None else args.seed
    out_dir = _prepare_out_dir(args)
    image = render_mod.render_image(scene, camera, pose, n_samples=args.samples, seed=seed)
    ppm_path = os.path.join(out_dir, f"{args.name}.ppm")
    render_mod.save_ppm(image.pixels, ppm_path)
    sidecar = {
        "format_version": 1,
        "width": camera.width,
        "height": camera.height,
        "pose": geom.pose_to_json(pose),
        "seed": seed,
        "n_samples": args.samples,
        "scene_path": os.path.abspath(args.scene),
    }
    with open(ppm_path + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
    print(f"wrote {ppm_path} (+ sidecar)")
    return 0


def cmd_plot(args) -> int:
    out_dir = _prepare_out_dir(args)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    out_path = os.path.join(out_dir, f"{stem}.svg")
    if args.input.endswith(".jsonl"):
        viz.plot_runlog(sim.load_runlog(args.input), out_path)
    else:
        payload = baselines.load_report(args.input)
        report = baselines.ComparisonReport(
            rows=payload["rows"], trajectories=payload.get("trajectories", {})
        )
        viz.plot_comparison(report, out_path)
    print(f"wrote {out_path}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help exits 0
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
