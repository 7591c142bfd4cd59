"""Receding-horizon navigation episodes over analytic scenes.

The loop plans from the current belief, applies the first control to a
noisy ground-truth simulator, renders the measurement from the
ground-truth pose, filters, and warm-starts the next plan from the
shifted waypoints.  Every random draw comes from the master seed split
by a role tag, so an episode is a pure function of its RunConfig.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field, replace
from typing import Callable, List, Optional

import numpy as np

from . import dynamics as dyn
from . import estimator as est
from . import field as fld
from . import geom
from . import planner as plan_mod
from . import render as render_mod

FORMAT_VERSION = 1
MODES = ("closed-loop", "open-loop", "plan-only", "estimate-only")

# Role tags keep the per-module random streams independent; the rrt tag
# is reserved for the sampling-based baseline.
ROLE_TAGS = {
    "sim-noise": 0x53494D4E,
    "pixel-select": 0x50495853,
    "render-jitter": 0x52454E44,
    "rrt": 0x52525400,
}


class PlannerFailed(RuntimeError):
    """Planning raised inside an episode; recorded as terminal status."""


class FilterDiverged(RuntimeError):
    """Belief mean left the scene-diameter ball around the truth."""


def split_rng(master_seed: int, role: str) -> np.random.Generator:
    """Independent generator for one role under the master seed."""
    return np.random.default_rng([int(master_seed), ROLE_TAGS[role]])


def split_int(master_seed: int, role: str, step: int) -> int:
    """Stable 32-bit seed for APIs that take plain integer seeds."""
    seq = np.random.SeedSequence([int(master_seed), ROLE_TAGS[role], int(step)])
    return int(seq.generate_state(1)[0])


# -- configuration -------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    scene_path: str
    robot_path: str
    start: dyn.FullState
    goal_position: np.ndarray
    goal_yaw: float = 0.0
    planner: plan_mod.PlannerConfig = dc_field(default_factory=plan_mod.PlannerConfig)
    filter: est.FilterConfig = dc_field(default_factory=est.FilterConfig)
    camera: render_mod.Camera = dc_field(default_factory=render_mod.Camera)
    sigma0: float = 0.1
    mode: str = "closed-loop"
    max_steps: int = 200
    goal_tolerance: float = 0.05
    master_seed: int = 0
    replay_log: Optional[str] = None
    image_dir: Optional[str] = None  # per-step PPM dumps when set

    def __post_init__(self):
        object.__setattr__(
            self, "goal_position", np.asarray(self.goal_position, dtype=float)
        )
        if self.goal_position.shape != (3,):
            raise ValueError("goal_position must be a 3-vector")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.goal_tolerance <= 0:
            raise ValueError("goal_tolerance must be positive")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if self.mode == "estimate-only" and not self.replay_log:
            raise ValueError("estimate-only mode needs replay_log")


def _planner_config_to_json(config: plan_mod.PlannerConfig) -> dict:
    return {
        "horizon": config.horizon,
        "dt": config.dt,
        "gamma": np.asarray(config.gamma).tolist(),
        "learning_rate": config.learning_rate,
        "iterations": config.iterations,
        "warm_iterations": config.warm_iterations,
        "grid_resolution": config.grid_resolution,
        "occupancy_threshold": config.occupancy_threshold,
        "seed": config.seed,
        "use_finite_differences": config.use_finite_differences,
    }


def _filter_config_to_json(config: est.FilterConfig) -> dict:
    return {
        "process_noise": np.asarray(config.process_noise).tolist(),
        "measurement_noise": config.measurement_noise,
        "pixel_budget": config.pixel_budget,
        "gradient_steps": config.gradient_steps,
        "learning_rate_pose": config.learning_rate_pose,
        "learning_rate_velocity": config.learning_rate_velocity,
        "outlier_quantile": config.outlier_quantile,
        "detector_window": config.detector_window,
        "score_floor": config.score_floor,
        "resample_per_step": config.resample_per_step,
        "render_samples": config.render_samples,
        "process_weight": config.process_weight,
    }


def _camera_to_json(camera: render_mod.Camera) -> dict:
    return {
        "width": camera.width,
        "height": camera.height,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
    }


def run_config_to_json(config: RunConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "scene_path": config.scene_path,
        "robot_path": config.robot_path,
        "start": dyn.state_to_json(config.start),
        "goal_position": config.goal_position.tolist(),
        "goal_yaw": config.goal_yaw,
        "planner": _planner_config_to_json(config.planner),
        "filter": _filter_config_to_json(config.filter),
        "camera": _camera_to_json(config.camera),
        "sigma0": config.sigma0,
        "mode": config.mode,
        "max_steps": config.max_steps,
        "goal_tolerance": config.goal_tolerance,
        "master_seed": config.master_seed,
        "replay_log": config.replay_log,
        "image_dir": config.image_dir,
    }


def run_config_from_json(payload: dict) -> RunConfig:
    planner_kwargs = dict(payload.get("planner", {}))
    filter_kwargs = dict(payload.get("filter", {}))
    if "process_noise" in filter_kwargs and isinstance(filter_kwargs["process_noise"], list):
        filter_kwargs["process_noise"] = np.asarray(filter_kwargs["process_noise"])
    camera_kwargs = dict(payload.get("camera", {}))
    return RunConfig(
        scene_path=payload["scene_path"],
        robot_path=payload["robot_path"],
        start=dyn.state_from_json(payload["start"]),
        goal_position=np.asarray(payload["goal_position"], dtype=float),
        goal_yaw=float(payload.get("goal_yaw", 0.0)),
        planner=plan_mod.PlannerConfig(**planner_kwargs),
        filter=est.FilterConfig(**filter_kwargs),
        camera=render_mod.Camera(**camera_kwargs),
        sigma0=float(payload.get("sigma0", 0.1)),
        mode=payload.get("mode", "closed-loop"),
        max_steps=int(payload.get("max_steps", 200)),
        goal_tolerance=float(payload.get("goal_tolerance", 0.05)),
        master_seed=int(payload.get("master_seed", 0)),
        replay_log=payload.get("replay_log"),
        image_dir=payload.get("image_dir"),
    )


def save_run_config(path, config: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(run_config_to_json(config), handle, indent=2, sort_keys=True)


def load_run_config(path) -> RunConfig:
    """Parse a config file; scene/robot paths resolve against its folder."""
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    config = run_config_from_json(payload)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(rel):
        return rel if os.path.isabs(rel) else os.path.join(base, rel)

    resolved = replace(
        config,
        scene_path=resolve(config.scene_path),
        robot_path=resolve(config.robot_path),
        replay_log=resolve(config.replay_log) if config.replay_log else None,
    )
    for label, file_path in (("scene", resolved.scene_path), ("robot", resolved.robot_path)):
        if not os.path.exists(file_path):
            raise FileNotFoundError(f"{label} file not found: {file_path}")
    return resolved


# -- run log ---------------------------------------------------------------------------


@dataclass
class RunLog:
    header: dict
    records: List[dict]
    footer: dict

    @property
    def status(self) -> str:
        return self.footer["status"]


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_runlog(path, log: RunLog) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(_dump_line(log.header) + "\n")
        for record in log.records:
            handle.write(_dump_line(record) + "\n")
        handle.write(_dump_line(log.footer) + "\n")


def load_runlog(path) -> RunLog:
    with open(path, "r", encoding="utf-8") as handle:
        lines = [json.loads(line) for line in handle if line.strip()]
    if len(lines) < 2:
        raise ValueError("run log needs a header and a footer line")
    return RunLog(lines[0], lines[1:-1], lines[-1])


# -- episode loop ------------------------------------------------------------------------


def shift_warm_start(
    prev: dyn.FlatTrajectory, mean: dyn.FullState, goal: dyn.FlatWaypoint
) -> dyn.FlatTrajectory:
    """One-step shift W <- [mu_t, W[2:], goal]; boundary pins preserved."""
    positions = np.concatenate(
        [mean.position[None, :], prev.positions[2:], goal.position[None, :]]
    )
    tail = prev.yaws[2:]
    # Express the belief yaw in the tail's unwrapped branch so the raw
    # sequence stays free of 2 pi jumps.
    head_yaw = tail[0] - dyn.wrap_angle(tail[0] - geom.yaw_of(mean.rotation))
    goal_yaw = tail[-1] + dyn.wrap_angle(goal.yaw - tail[-1])
    yaws = np.concatenate([[head_yaw], tail, [goal_yaw]])
    return dyn.FlatTrajectory(
        positions,
        yaws,
        prev.dt,
        start_velocity=mean.velocity,
        start_yaw_rate=float(mean.angular_velocity[2]),
    )


def default_render_fn(scene, camera, pose, n_samples: int, seed: int):
    return render_mod.render_image(scene, camera, pose, n_samples=n_samples, seed=seed)


def _goal_distance(state: dyn.FullState, goal_position: np.ndarray) -> float:
    return float(np.linalg.norm(state.position - goal_position))


def _body_collides(state: dyn.FullState, scene, body: dyn.BodyModel) -> bool:
    points = body.points @ state.rotation.T + state.position
    return bool(np.any(scene.occupancy(points)))


def _errors_against_truth(mean: dyn.FullState, truth: dyn.FullState) -> dict:
    delta = dyn.state_difference(mean, truth)
    return {
        "rotation_error": float(np.linalg.norm(delta[0:3])),
        "translation_error": float(np.linalg.norm(mean.position - truth.position)),
        "velocity_error": float(np.linalg.norm(mean.velocity - truth.velocity)),
    }


def _plan_payload(result: plan_mod.PlanResult) -> dict:
    return {
        "positions": result.trajectory.positions.tolist(),
        "yaws": result.trajectory.yaws.tolist(),
        "collision_cost": float(result.collision_trace[-1]),
        "control_cost": float(result.control_trace[-1]),
        "aborted": result.aborted,
    }


def _make_header(config: RunConfig) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "runlog",
        "mode": config.mode,
        "master_seed": config.master_seed,
        "dt": config.planner.dt,
        "goal_position": config.goal_position.tolist(),
        "goal_yaw": config.goal_yaw,
        "goal_tolerance": config.goal_tolerance,
        "max_steps": config.max_steps,
        "scene_path": config.scene_path,
        "robot_path": config.robot_path,
    }


def _maybe_save_image(config: RunConfig, step: int, image) -> Optional[str]:
    if config.image_dir is None:
        return None
    os.makedirs(config.image_dir, exist_ok=True)
    ref = os.path.join(config.image_dir, f"step_{step:04d}.ppm")
    render_mod.save_ppm(image.pixels, ref)
    return ref


def initial_plan(
    config: RunConfig,
    scene=None,
    robot: Optional[dyn.RobotModel] = None,
    start: Optional[dyn.FullState] = None,
) -> plan_mod.PlanResult:
    """Grid-initialized optimized plan from the start state to the goal."""
    scene = fld.load_scene(config.scene_path) if scene is None else scene
    robot = dyn.load_robot(config.robot_path) if robot is None else robot
    start = config.start if start is None else start
    body = dyn.make_body_model(robot)
    traj0, _ = plan_mod.initial_trajectory(
        scene,
        start.position,
        config.goal_position,
        config.planner,
        robot=robot,
        start_velocity=start.velocity,
        start_yaw=geom.yaw_of(start.rotation),
    )
    yaws = traj0.yaws.copy()
    yaws[-1] = yaws[-2] + dyn.wrap_angle(config.goal_yaw - yaws[-2])
    traj0 = dyn.FlatTrajectory(
        traj0.positions, yaws, traj0.dt,
        start_velocity=traj0.start_velocity,
        start_yaw_rate=traj0.start_yaw_rate,
    )
    return plan_mod.optimize(traj0, scene, body, config.planner, robot=robot)


def run_episode(
    config: RunConfig,
    scene=None,
    robot: Optional[dyn.RobotModel] = None,
    render_fn: Optional[Callable] = None,
) -> RunLog:
    """Execute one episode; never raises on planner/filter failure.

    Terminal statuses: reached, collided, timeout, planner_failed,
    filter_diverged (plus planned/replayed for the degenerate modes).
    """
    scene = fld.load_scene(config.scene_path) if scene is None else scene
    robot = dyn.load_robot(config.robot_path) if robot is None else robot
    render_fn = default_render_fn if render_fn is None else render_fn

    lo = np.asarray(scene.bounds_lo, dtype=float)
    hi = np.asarray(scene.bounds_hi, dtype=float)
    if np.any(config.goal_position < lo) or np.any(config.goal_position > hi):
        raise ValueError("goal lies outside the scene bounds")
    diameter = float(np.linalg.norm(hi - lo))

    body = dyn.make_body_model(robot)
    goal = dyn.FlatWaypoint(config.goal_position, config.goal_yaw)
    header = _make_header(config)

    if config.mode == "estimate-only":
        return _run_replay(config, scene, robot, render_fn, header)

    sim_rng = split_rng(config.master_seed, "sim-noise")
    pixel_rng = split_rng(config.master_seed, "pixel-select")
    truth = config.start
    belief = est.initial_belief(config.start, config.sigma0)
    records: List[dict] = []

    def finish(status: str, extra: Optional[dict] = None) -> RunLog:
        footer = {"status": status, "steps": len(records)}
        if extra:
            footer.update(extra)
        return RunLog(header, records, footer)

    if _goal_distance(truth, config.goal_position) < config.goal_tolerance:
        return finish("reached")

    try:
        result = initial_plan(config, scene, robot, start=belief.mean)
    except Exception as exc:  # noqa: BLE001 - terminal status, not a crash
        return finish("planner_failed", {"error": f"{type(exc).__name__}: {exc}"})

    if config.mode == "plan-only":
        return finish("planned", {"plan": _plan_payload(result)})

    # The plan's head acceleration fixes the attitude and body rate that make
    # its first control feasible; start simulator and filter from that state
    # rather than the rest attitude of config.start.
    exec_start = dyn.execution_state(result.trajectory, robot)
    truth = exec_start
    belief = est.initial_belief(exec_start, config.sigma0)
    header["execution_start"] = dyn.state_to_json(exec_start)

    if config.mode == "open-loop":
        # The terminal stencil control holds the endpoint; execute h steps.
        n_controls = result.trajectory.horizon
        for step in range(min(n_controls, config.max_steps)):
            control = result.controls[step]
            truth = dyn.simulate_step(truth, control, config.planner.dt, robot, rng=sim_rng)
            record = {
                "t": (step + 1) * config.planner.dt,
                "truth": dyn.state_to_json(truth),
                "belief": None,
                "control": np.asarray(control).tolist(),
                "plan": None,
                "image": None,
                "goal_distance_truth": _goal_distance(truth, config.goal_position),
                "collided": _body_collides(truth, scene, body),
            }
            records.append(record)
            if record["collided"]:
                return finish("collided")
            if record["goal_distance_truth"] < config.goal_tolerance:
                return finish("reached")
        return finish("timeout")

    # closed-loop
    for step in range(config.max_steps):
        try:
            if step > 0:
                warm = shift_warm_start(result.trajectory, belief.mean, goal)
                result = plan_mod.optimize(
                    warm, scene, body, config.planner, robot=robot, warm=True
                )
            # One-step inverse toward the plan's next pose; equals the derived
            # feedforward when the belief sits exactly on the plan head.
            control = dyn.tracking_control(
                belief.mean,
                result.trajectory.positions[1],
                result.states[1].rotation,
                config.planner.dt,
                robot,
            )
        except Exception as exc:  # noqa: BLE001
            return finish("planner_failed", {"error": f"{type(exc).__name__}: {exc}"})
        truth = dyn.simulate_step(truth, control, config.planner.dt, robot, rng=sim_rng)
        predicted = est.propagate(belief, control, config.planner.dt, robot, config.filter)
        render_seed = split_int(config.master_seed, "render-jitter", step)
        # The measurement always comes from the ground-truth pose.
        image = render_fn(
            scene, config.camera, truth.pose(), config.filter.render_samples, render_seed
        )
        belief = est.update(
            predicted,
            image,
            scene,
            config.camera,
            config.filter,
            rng=pixel_rng,
            render_seed=render_seed,
        )
        image_ref = _maybe_save_image(config, step, image)
        record = {
            "t": (step + 1) * config.planner.dt,
            "truth": dyn.state_to_json(truth),
            "belief": est.belief_to_json(belief),
            "control": np.asarray(control).tolist(),
            "plan": _plan_payload(result),
            "image": image_ref,
            "goal_distance_truth": _goal_distance(truth, config.goal_position),
            "goal_distance_belief": _goal_distance(belief.mean, config.goal_position),
            "collided": _body_collides(truth, scene, body),
        }
        record.update(_errors_against_truth(belief.mean, truth))
        records.append(record)
        if record["collided"]:
            return finish("collided")
        if record["translation_error"] > diameter:
            return finish("filter_diverged")
        if record["goal_distance_belief"] < config.goal_tolerance:
            return finish("reached")
    return finish("timeout")


def _run_replay(config: RunConfig, scene, robot, render_fn, header) -> RunLog:
    """Re-filter a logged control sequence against re-rendered images."""
    source = load_runlog(config.replay_log)
    pixel_rng = split_rng(config.master_seed, "pixel-select")
    prior_state = config.start
    if "execution_start" in source.header:
        prior_state = dyn.state_from_json(source.header["execution_start"])
    belief = est.initial_belief(prior_state, config.sigma0)
    records: List[dict] = []
    for step, src in enumerate(source.records[: config.max_steps]):
        control = np.asarray(src["control"], dtype=float)
        truth = dyn.state_from_json(src["truth"])
        predicted = est.propagate(belief, control, config.planner.dt, robot, config.filter)
        render_seed = split_int(config.master_seed, "render-jitter", step)
        image = render_fn(
            scene, config.camera, truth.pose(), config.filter.render_samples, render_seed
        )
        belief = est.update(
            predicted,
            image,
            scene,
            config.camera,
            config.filter,
            rng=pixel_rng,
            render_seed=render_seed,
        )
        record = {
            "t": (step + 1) * config.planner.dt,
            "truth": src["truth"],
            "belief": est.belief_to_json(belief),
            "control": control.tolist(),
            "plan": None,
            "image": None,
            "goal_distance_truth": _goal_distance(truth, config.goal_position),
            "collided": bool(src.get("collided", False)),
        }
        record.update(_errors_against_truth(belief.mean, truth))
        records.append(record)
    footer = {"status": "replayed", "steps": len(records), "source_status": source.status}
    return RunLog(header, records, footer)
