"""Reference planners: minimum-snap splines and an RRT over thresholded density.

Both baselines reuse the trajectory optimizer's A* seeding and flatness
tracking, so a comparison between them isolates the planning strategy.
The minimum-snap planner interpolates the A* waypoints exactly; the RRT
plans positions only under a spherical collision model and tracks the
shortcut path at constant speed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as npoly

from . import dynamics as dyn
from . import planner as plan_mod

DEGREE = 7
N_COEF = DEGREE + 1
AXES = 4  # x, y, z, yaw


class SingularSystem(np.linalg.LinAlgError):
    """The spline system has no unique solution (degenerate times)."""


class Timeout(RuntimeError):
    """The tree hit its iteration cap before reaching the goal."""


# -- minimum snap ----------------------------------------------------------------


@dataclass(frozen=True)
class PolySegment:
    """One spline piece: degree-7 coefficients per axis, ascending powers."""

    coefficients: np.ndarray  # (4, 8) rows x, y, z, yaw
    duration: float

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=float)
        if coeffs.shape != (AXES, N_COEF):
            raise ValueError("coefficients must be (4, 8)")
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        object.__setattr__(self, "coefficients", coeffs)

    def evaluate(self, t, derivative: int = 0) -> np.ndarray:
        """Axis values (or a given time derivative) at local time t."""
        rows = [npoly.polyder(c, derivative) if derivative else c for c in self.coefficients]
        out = np.stack([npoly.polyval(t, row) for row in rows], axis=-1)
        return out


def _derivative_row(t: float, order: int) -> np.ndarray:
    """Coefficient row so that row @ c = d^order p / dt^order at t."""
    row = np.zeros(N_COEF)
    for i in range(order, N_COEF):
        factor = 1.0
        for k in range(order):
            factor *= i - k
        row[i] = factor * t ** (i - order)
    return row


def _snap_gram(duration: float) -> np.ndarray:
    """Gram matrix of integral of snap^2 over one segment."""
    gram = np.zeros((N_COEF, N_COEF))
    for i in range(4, N_COEF):
        di = i * (i - 1) * (i - 2) * (i - 3)
        for j in range(4, N_COEF):
            dj = j * (j - 1) * (j - 2) * (j - 3)
            power = i + j - 7
            gram[i, j] = di * dj * duration**power / power
    return gram


def default_segment_times(positions: np.ndarray, speed: float = 1.0) -> np.ndarray:
    """Durations proportional to inter-waypoint distance at the given speed."""
    lengths = np.linalg.norm(np.diff(positions, axis=0), axis=-1)
    return lengths / speed


def min_snap(
    waypoints: Sequence[dyn.FlatWaypoint],
    segment_times: Optional[Sequence[float]] = None,
    speed: float = 1.0,
) -> List[PolySegment]:
    """Spline through the waypoints minimizing the integral of squared snap.

    Boundary conditions pin velocity, acceleration, and jerk to zero at
    both trajectory ends (full rest, which is what the classic one-segment
    closed form satisfies); interior joints are continuous through jerk.
    """
    if len(waypoints) < 2:
        raise ValueError("need at least 2 waypoints")
    positions = np.stack([np.asarray(w.position, dtype=float) for w in waypoints])
    yaws = np.unwrap([float(w.yaw) for w in waypoints])
    if segment_times is None:
        times = default_segment_times(positions, speed)
    else:
        times = np.asarray(segment_times, dtype=float)
    n_seg = len(waypoints) - 1
    if times.shape != (n_seg,):
        raise ValueError("need one duration per segment")
    if not np.all(np.isfinite(times)) or np.any(times <= 0):
        raise SingularSystem("segment times must be positive and finite")

    n_var = N_COEF * n_seg
    gram = np.zeros((n_var, n_var))
    for s, duration in enumerate(times):
        sl = slice(s * N_COEF, (s + 1) * N_COEF)
        gram[sl, sl] = _snap_gram(duration)

    rows = []
    targets_per_axis = [[] for _ in range(AXES)]
    values = np.column_stack([positions, yaws[:, None]])  # (n_wp, 4)

    def add_row(segment: int, t: float, order: int, target_by_axis):
        row = np.zeros(n_var)
        row[segment * N_COEF : (segment + 1) * N_COEF] = _derivative_row(t, order)
        rows.append(row)
        for axis in range(AXES):
            targets_per_axis[axis].append(target_by_axis[axis])

    def add_joint_row(segment: int, order: int):
        row = np.zeros(n_var)
        row[segment * N_COEF : (segment + 1) * N_COEF] = _derivative_row(times[segment], order)
        row[(segment + 1) * N_COEF : (segment + 2) * N_COEF] -= _derivative_row(0.0, order)
        rows.append(row)
        for axis in range(AXES):
            targets_per_axis[axis].append(0.0)

    for s in range(n_seg):
        add_row(s, 0.0, 0, values[s])
        add_row(s, times[s], 0, values[s + 1])
    for order in (1, 2, 3):
        add_row(0, 0.0, order, np.zeros(AXES))
        add_row(n_seg - 1, times[-1], order, np.zeros(AXES))
    for s in range(n_seg - 1):
        for order in (1, 2, 3):
            add_joint_row(s, order)

    a_mat = np.stack(rows)
    n_con = a_mat.shape[0]
    kkt = np.zeros((n_var + n_con, n_var + n_con))
    kkt[:n_var, :n_var] = 2.0 * gram
    kkt[:n_var, n_var:] = a_mat.T
    kkt[n_var:, :n_var] = a_mat
    rhs = np.zeros((n_var + n_con, AXES))
    for axis in range(AXES):
        rhs[n_var:, axis] = targets_per_axis[axis]
    try:
        solution = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(solution)):
        raise SingularSystem("spline system produced non-finite coefficients")
    coeffs = solution[:n_var]  # (n_var, 4)

    segments = []
    for s, duration in enumerate(times):
        block = coeffs[s * N_COEF : (s + 1) * N_COEF].T  # (4, 8)
        segments.append(PolySegment(block, float(duration)))
    return segments


def snap_cost(segments: Sequence[PolySegment]) -> float:
    """Integral of squared snap over all four axes, integrated exactly."""
    total = 0.0
    for seg in segments:
        for c in seg.coefficients:
            snap = npoly.polyder(c, 4)
            if snap.size == 0:
                continue
            integrand = npoly.polymul(snap, snap)
            antiderivative = npoly.polyint(integrand)
            total += float(npoly.polyval(seg.duration, antiderivative))
    return total


def spline_duration(segments: Sequence[PolySegment]) -> float:
    return float(sum(seg.duration for seg in segments))


def evaluate_spline(segments: Sequence[PolySegment], t, derivative: int = 0) -> np.ndarray:
    """Axis values at global time t, clamped to the spline's span."""
    t = np.asarray(t, dtype=float)
    ends = np.cumsum([seg.duration for seg in segments])
    starts = ends - np.array([seg.duration for seg in segments])
    t_clamped = np.clip(t, 0.0, ends[-1])
    index = np.minimum(np.searchsorted(ends, t_clamped, side="right"), len(segments) - 1)
    out = np.zeros(t.shape + (AXES,))
    for s, seg in enumerate(segments):
        mask = index == s
        if np.any(mask):
            local = t_clamped[mask] - starts[s]
            out[mask] = seg.evaluate(local, derivative)
    return out


def sample_spline(segments: Sequence[PolySegment], dt: float) -> dyn.FlatTrajectory:
    """Uniform-timestep flat outputs along the spline, endpoint held.

    The horizon is padded to the minimum the difference stencils need;
    padding samples sit at the (zero-velocity) terminal waypoint.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    total = spline_duration(segments)
    horizon = max(int(np.ceil(total / dt)), 4)
    t_samples = np.arange(horizon + 1) * dt
    values = evaluate_spline(segments, t_samples)
    return dyn.FlatTrajectory(values[:, :3], values[:, 3], dt)


# -- RRT --------------------------------------------------------------------------


@dataclass(frozen=True)
class RrtConfig:
    step_size: float = 0.1
    goal_bias: float = 0.1
    max_iterations: int = 50000
    shell_points: int = 26
    edge_spacing: Optional[float] = None  # defaults to half the collision radius

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class RrtTree:
    nodes: np.ndarray  # (n, 3)
    parents: np.ndarray  # (n,), parent index, -1 at the root
    step_size: float
    goal_bias: float
    collision_radius: float


def _shell_directions(count: int) -> np.ndarray:
    """Deterministic near-uniform unit vectors (Fibonacci sphere)."""
    k = np.arange(count)
    z = 1.0 - (2.0 * k + 1.0) / count
    radius = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    angle = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([radius * np.cos(angle), radius * np.sin(angle), z], axis=-1)


def _ball_offsets(radius: float, shell_points: int) -> np.ndarray:
    return np.concatenate([np.zeros((1, 3)), radius * _shell_directions(shell_points)])


def sphere_collides(field, center, radius: float, threshold: float, shell_points: int = 26) -> bool:
    """True when the density exceeds the threshold anywhere on the ball.

    The ball is probed at its center plus a deterministic shell sample.
    """
    center = np.asarray(center, dtype=float)
    return bool(np.any(field.density(center + _ball_offsets(radius, shell_points)) > threshold))


def _edge_free(field, a, b, radius, threshold, config: RrtConfig) -> bool:
    spacing = config.edge_spacing if config.edge_spacing is not None else 0.5 * radius
    length = float(np.linalg.norm(b - a))
    count = max(int(np.ceil(length / max(spacing, 1e-9))) + 1, 2)
    centers = np.linspace(a, b, count)
    probes = centers[:, None, :] + _ball_offsets(radius, config.shell_points)
    return not bool(np.any(field.density(probes.reshape(-1, 3)) > threshold))


def grow_rrt(
    field,
    start,
    goal,
    threshold: float,
    radius: float,
    rng: np.random.Generator,
    config: Optional[RrtConfig] = None,
) -> Tuple[RrtTree, int]:
    """Goal-biased tree from start; returns (tree, index of the goal node).

    Raises Timeout when the iteration cap is hit before connecting.
    """
    config = RrtConfig() if config is None else config
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    for name, point in (("start", start), ("goal", goal)):
        if sphere_collides(field, point, radius, threshold, config.shell_points):
            raise plan_mod.StartOrGoalOccupied(f"{name} collides under the spherical model")

    lo = np.asarray(field.bounds_lo, dtype=float)
    hi = np.asarray(field.bounds_hi, dtype=float)
    nodes = [start]
    parents = [-1]

    def finish(goal_parent: int) -> Tuple[RrtTree, int]:
        nodes.append(goal)
        parents.append(goal_parent)
        tree = RrtTree(
            np.stack(nodes),
            np.asarray(parents, dtype=int),
            config.step_size,
            config.goal_bias,
            radius,
        )
        return tree, len(nodes) - 1

    if _edge_free(field, start, goal, radius, threshold, config):
        return finish(0)

    for _ in range(config.max_iterations):
        if rng.uniform() < config.goal_bias:
            sample = goal
        else:
            sample = rng.uniform(lo, hi)
        stacked = np.stack(nodes)
        nearest = int(np.argmin(np.linalg.norm(stacked - sample, axis=-1)))
        offset = sample - stacked[nearest]
        distance = float(np.linalg.norm(offset))
        if distance < 1e-12:
            continue
        new = stacked[nearest] + offset * min(config.step_size / distance, 1.0)
        if not _edge_free(field, stacked[nearest], new, radius, threshold, config):
            continue
        nodes.append(new)
        parents.append(nearest)
        if np.linalg.norm(new - goal) <= config.step_size and _edge_free(
            field, new, goal, radius, threshold, config
        ):
            return finish(len(nodes) - 1)
    raise Timeout(f"no path after {config.max_iterations} iterations")


def _extract_path(tree: RrtTree, leaf: int) -> np.ndarray:
    chain = []
    index = leaf
    while index >= 0:
        chain.append(tree.nodes[index])
        index = int(tree.parents[index])
    return np.stack(chain[::-1])


def shortcut_path(field, path: np.ndarray, threshold: float, radius: float, config: RrtConfig) -> np.ndarray:
    """Greedy shortcutting: hop to the farthest visible vertex each step."""
    kept = [path[0]]
    i = 0
    while i < len(path) - 1:
        j = len(path) - 1
        while j > i + 1 and not _edge_free(field, path[i], path[j], radius, threshold, config):
            j -= 1
        kept.append(path[j])
        i = j
    return np.stack(kept)


def rrt_plan(
    field,
    start,
    goal,
    threshold: float,
    radius: float,
    rng: np.random.Generator,
    config: Optional[RrtConfig] = None,
) -> np.ndarray:
    """Collision-free polyline from start to goal, shortcut-smoothed."""
    config = RrtConfig() if config is None else config
    tree, goal_index = grow_rrt(field, start, goal, threshold, radius, rng, config)
    path = _extract_path(tree, goal_index)
    return shortcut_path(field, path, threshold, radius, config)


def track_path(path: np.ndarray, dt: float, speed: float = 1.0, yaw: float = 0.0) -> dyn.FlatTrajectory:
    """Constant-speed, constant-yaw flat outputs along a polyline.

    Controls for a robot then come from dynamics.derive_states.
    """
    path = np.asarray(path, dtype=float)
    if dt <= 0 or speed <= 0:
        raise ValueError("dt and speed must be positive")
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=-1)))
    horizon = max(int(np.ceil(length / (speed * dt))), 4)
    positions = plan_mod.resample_arclength(path, horizon + 1)
    yaws = np.full(horizon + 1, float(yaw))
    return dyn.FlatTrajectory(positions, yaws, dt)


# -- comparison harness ------------------------------------------------------------


PLANNER_NAMES = ("proposed", "min_snap", "rrt")


@dataclass(frozen=True)
class Scenario:
    name: str
    start: np.ndarray
    goal: np.ndarray
    start_yaw: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float))


@dataclass(frozen=True)
class ComparisonConfig:
    planner: plan_mod.PlannerConfig = dc_field(default_factory=plan_mod.PlannerConfig)
    rrt: RrtConfig = dc_field(default_factory=RrtConfig)
    collision_radius: float = 0.3
    rrt_threshold: Optional[float] = None  # None: half the scene's peak density
    tracking_speed: float = 1.0


@dataclass
class ComparisonReport:
    rows: List[dict]
    trajectories: dict

    def row(self, scenario: str, planner: str) -> dict:
        for entry in self.rows:
            if entry["scenario"] == scenario and entry["planner"] == planner:
                return entry
        raise KeyError(f"no row for {scenario}/{planner}")


def resolve_threshold(field, config: ComparisonConfig) -> float:
    if config.rrt_threshold is not None:
        return config.rrt_threshold
    primitives = getattr(field, "primitives", None)
    if primitives:
        return 0.5 * max(p.rho_max for p in primitives)
    return 0.5 * 10.0


def ground_truth_failure(traj: dyn.FlatTrajectory, field, body: dyn.BodyModel, robot: dyn.RobotModel) -> bool:
    """True when any body point is inside ground-truth occupancy at any step."""
    pairs = dyn.derive_states(traj, robot)
    for state, _ in pairs:
        points = body.points @ state.rotation.T + state.position
        if bool(np.any(field.occupancy(points))):
            return True
    return False


def _score(traj: dyn.FlatTrajectory, field, body, robot, gamma) -> Tuple[float, float, bool]:
    collision = plan_mod.collision_cost(traj, field, body, robot)
    effort = plan_mod.control_cost(traj, gamma, robot) / traj.horizon
    failure = ground_truth_failure(traj, field, body, robot)
    return collision, effort, failure


def compare_planners(
    scenarios: Sequence[Scenario],
    field,
    body: dyn.BodyModel,
    config: Optional[ComparisonConfig] = None,
    robot: Optional[dyn.RobotModel] = None,
) -> ComparisonReport:
    """Run proposed / min-snap / RRT per scenario; errors never abort the batch."""
    config = ComparisonConfig() if config is None else config
    robot = dyn.RobotModel() if robot is None else robot
    threshold = resolve_threshold(field, config)
    gamma = config.planner.gamma
    dt = config.planner.dt

    rows: List[dict] = []
    trajectories: dict = {}

    def record(scenario: Scenario, planner: str, outcome):
        entry = {
            "scenario": scenario.name,
            "planner": planner,
            "collision_cost": float("nan"),
            "control_cost": float("nan"),
            "failure": True,
            "error": "",
        }
        if isinstance(outcome, Exception):
            entry["error"] = f"{type(outcome).__name__}: {outcome}"
        else:
            traj, (collision, effort, failure) = outcome
            entry.update(
                collision_cost=collision, control_cost=effort, failure=bool(failure)
            )
            trajectories.setdefault(scenario.name, {})[planner] = traj.positions.tolist()
        rows.append(entry)

    for scenario in scenarios:
        try:
            traj0, _ = plan_mod.initial_trajectory(
                field, scenario.start, scenario.goal, config.planner,
                robot=robot, start_yaw=scenario.start_yaw,
            )
            result = plan_mod.optimize(traj0, field, body, config.planner, robot=robot)
            traj = result.trajectory
            record(scenario, "proposed", (traj, _score(traj, field, body, robot, gamma)))
        except Exception as exc:  # noqa: BLE001 - per-scenario errors are data
            record(scenario, "proposed", exc)

        try:
            waypoints, _ = plan_mod.astar_init(
                field, scenario.start, scenario.goal, config.planner,
                planar=robot.kind == "planar",
            )
            flat = [dyn.FlatWaypoint(p, scenario.start_yaw) for p in waypoints]
            segments = min_snap(flat, speed=config.tracking_speed)
            traj = sample_spline(segments, dt)
            record(scenario, "min_snap", (traj, _score(traj, field, body, robot, gamma)))
        except Exception as exc:  # noqa: BLE001
            record(scenario, "min_snap", exc)

        try:
            rng = np.random.default_rng([scenario.seed, 0x52525400])
            path = rrt_plan(
                field, scenario.start, scenario.goal, threshold,
                config.collision_radius, rng, config.rrt,
            )
            traj = track_path(path, dt, config.tracking_speed, scenario.start_yaw)
            record(scenario, "rrt", (traj, _score(traj, field, body, robot, gamma)))
        except Exception as exc:  # noqa: BLE001
            record(scenario, "rrt", exc)

    return ComparisonReport(rows, trajectories)


def report_to_json(report: ComparisonReport) -> dict:
    return {
        "format_version": 1,
        "rows": report.rows,
        "trajectories": report.trajectories,
    }


def save_report(path, report: ComparisonReport) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report_to_json(report), handle, indent=2)


def save_report_csv(path, report: ComparisonReport) -> None:
    columns = ["scenario", "planner", "collision_cost", "control_cost", "failure"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in report.rows:
            writer.writerow(row)


def load_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)
