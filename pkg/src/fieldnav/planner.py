"""Trajectory optimization of flat-output waypoints through a density field.

The objective is the collision bound plus control effort,

    J(W) = sum_tau sum_b rho(R_tau b + sigma_tau) s_tau(b)
         + sum_tau u_tau^T Gamma u_tau,

minimized over the interior waypoints (positions and yaw; endpoints stay
pinned) with Adam.  Gradients come from forward-mode jets pushed through
the flatness chain and the field's density gradient; a finite-difference
fallback is available behind a config flag.  The swept distance s uses
the forward step tau -> tau+1 with a zero final term, and the effort
term penalizes quadrotor thrust deviation from hover so that gravity
compensation is free.

Initial guesses come from A* over a coarse occupancy grid (cells whose
center density exceeds a threshold are blocked), resampled to the
horizon by arc length, with a straight-line fallback when the grid has
no path.
"""

from __future__ import annotations

import csv
import heapq
import json
from dataclasses import dataclass, field as dc_field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import field as field_mod
from . import geom


class StartOrGoalOccupied(ValueError):
    """Endpoint density exceeds the occupancy threshold."""


class NonFiniteCost(ArithmeticError):
    """The objective was non-finite at the initial iterate."""


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 40
    dt: float = 0.1
    gamma: float = 1e-3  # scalar or per-control diagonal
    learning_rate: float = 1e-3
    iterations: int = 2500
    warm_iterations: int = 250
    grid_resolution: int = 24
    occupancy_threshold: float = 5.0
    seed: int = 0
    use_finite_differences: bool = False

    def __post_init__(self):
        if np.any(np.asarray(self.gamma) < 0):
            raise ValueError("gamma entries must be non-negative")
        if self.iterations < 1 or self.warm_iterations < 0:
            raise ValueError("need iterations >= 1 and warm_iterations >= 0")
        if self.horizon < 4:
            raise ValueError("horizon must be >= 4")


@dataclass
class PlanResult:
    trajectory: dyn.FlatTrajectory
    states: List[dyn.FullState]
    controls: np.ndarray  # (h+1, control_dim)
    collision_trace: np.ndarray  # per-iteration collision term
    control_trace: np.ndarray  # per-iteration effort term
    iterations_run: int
    aborted: Optional[str] = None

    @property
    def final_cost(self) -> float:
        return float(self.collision_trace[-1] + self.control_trace[-1])


def _gamma_diagonal(gamma, dim: int) -> np.ndarray:
    arr = np.asarray(gamma, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise ValueError(f"gamma must be scalar or length {dim}")
    return arr


def _transform_body_points(rotations, positions, body_points: np.ndarray):
    """World positions of body points at every waypoint: R_tau b + sigma_tau."""
    if ad.is_jet(rotations) or ad.is_jet(positions):
        width = rotations.width if ad.is_jet(rotations) else positions.width
        rot = rotations if ad.is_jet(rotations) else ad.Jet.constant(rotations, width)
        pos = positions if ad.is_jet(positions) else ad.Jet.constant(positions, width)
        val = np.einsum("tij,bj->tbi", rot.val, body_points) + pos.val[:, None, :]
        tan = np.einsum("tijd,bj->tbid", rot.tan, body_points) + pos.tan[:, None, :, :]
        return ad.Jet(val, tan)
    return np.einsum("tij,bj->tbi", rotations, body_points) + positions[:, None, :]


def _objective_terms(positions_ext, yaws_ext, dt, field, body, robot, gamma_vec):
    """(collision, effort) for extended flat outputs; jets pass through."""
    chain = dyn.flat_chain(positions_ext, yaws_ext, dt, robot)
    points = _transform_body_points(chain["rotations"], positions_ext[1:], body.points)
    rho = field_mod.density_jet(field, points)
    moved = points[1:] - points[:-1]
    swept = ad.norm(moved, axis=-1)
    collision = ad.sum(rho[:-1] * swept)

    controls = chain["controls"][:-1]
    if robot.kind == "quadrotor":
        hover = np.zeros(4)
        hover[0] = robot.mass * robot.gravity
        effort_controls = controls - hover
    else:
        effort_controls = controls
    effort = ad.sum(effort_controls * effort_controls * gamma_vec)
    return collision, effort


def collision_cost(
    traj: dyn.FlatTrajectory,
    field,
    body: dyn.BodyModel,
    robot: Optional[dyn.RobotModel] = None,
) -> float:
    """Density integrated along each body point's swept path."""
    robot = dyn.RobotModel() if robot is None else robot
    positions_ext, yaws_ext = dyn.extend_flat_outputs(traj)
    chain = dyn.flat_chain(positions_ext, yaws_ext, traj.dt, robot)
    points = _transform_body_points(chain["rotations"], traj.positions, body.points)
    rho = field.density(points)
    swept = np.linalg.norm(points[1:] - points[:-1], axis=-1)
    return float(np.sum(rho[:-1] * swept))


def control_cost(
    traj: dyn.FlatTrajectory,
    gamma,
    robot: Optional[dyn.RobotModel] = None,
) -> float:
    """Raw quadratic effort sum_tau u_tau^T Gamma u_tau over tau < h."""
    robot = dyn.RobotModel() if robot is None else robot
    pairs = dyn.derive_states(traj, robot)
    controls = np.stack([control for _, control in pairs[:-1]])
    gamma_vec = _gamma_diagonal(gamma, robot.control_dim)
    return float(np.sum(controls * controls * gamma_vec))


def objective(
    traj: dyn.FlatTrajectory,
    field,
    body: dyn.BodyModel,
    config: PlannerConfig,
    robot: Optional[dyn.RobotModel] = None,
) -> Tuple[float, float]:
    """(collision, effort) exactly as the optimizer scores a trajectory."""
    robot = dyn.RobotModel() if robot is None else robot
    gamma_vec = _gamma_diagonal(config.gamma, robot.control_dim)
    positions_ext, yaws_ext = dyn.extend_flat_outputs(traj)
    collision, effort = _objective_terms(
        positions_ext, yaws_ext, traj.dt, field, body, robot, gamma_vec
    )
    return float(collision), float(effort)


def intersection_volume(
    traj: dyn.FlatTrajectory,
    scene,
    body: dyn.BodyModel,
    robot: Optional[dyn.RobotModel] = None,
) -> float:
    """Ground-truth occupied volume swept by the body, summed over waypoints.

    Each body point contributes its grid-cell volume whenever it sits
    inside an occupied region; this is the reference metric the collision
    cost is expected to track.
    """
    robot = dyn.RobotModel() if robot is None else robot
    positions_ext, yaws_ext = dyn.extend_flat_outputs(traj)
    chain = dyn.flat_chain(positions_ext, yaws_ext, traj.dt, robot)
    points = _transform_body_points(chain["rotations"], traj.positions, body.points)
    inside = scene.occupancy(points)
    return float(np.sum(inside * body.cell_volume))


# -- A* initialization ---------------------------------------------------------------


_NEIGHBOR_OFFSETS = np.array(
    [
        (dx, dy, dz)
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
        if (dx, dy, dz) != (0, 0, 0)
    ]
)


def grid_search(occupied: np.ndarray, start_cell, goal_cell, scale):
    """26-connected A* over an occupancy grid.

    Ties break lexicographically on (f-cost, h-cost, linear cell index)
    so expansion order is deterministic.  Returns (cells, cost) or
    (None, inf) when the goal is unreachable.
    """
    res = occupied.shape
    move_cost = np.linalg.norm(_NEIGHBOR_OFFSETS * scale, axis=-1)
    goal_arr = np.asarray(goal_cell, dtype=float)

    def heuristic(idx):
        return float(np.linalg.norm((np.asarray(idx) - goal_arr) * scale))

    start_cell, goal_cell = tuple(start_cell), tuple(goal_cell)
    h0 = heuristic(start_cell)
    open_heap = [(h0, h0, np.ravel_multi_index(start_cell, res), start_cell)]
    g_score = {start_cell: 0.0}
    came_from = {}
    closed = set()
    while open_heap:
        _, _, _, current = heapq.heappop(open_heap)
        if current in closed:
            continue
        closed.add(current)
        if current == goal_cell:
            cells = [goal_cell]
            while cells[-1] != start_cell:
                cells.append(came_from[cells[-1]])
            cells.reverse()
            return cells, g_score[goal_cell]
        for offset, step_cost in zip(_NEIGHBOR_OFFSETS, move_cost):
            nxt = (current[0] + offset[0], current[1] + offset[1], current[2] + offset[2])
            if any(n < 0 or n >= r for n, r in zip(nxt, res)):
                continue
            if occupied[nxt] or nxt in closed:
                continue
            tentative = g_score[current] + step_cost
            if tentative < g_score.get(nxt, np.inf):
                g_score[nxt] = tentative
                came_from[nxt] = current
                h_cost = heuristic(nxt)
                heapq.heappush(
                    open_heap,
                    (tentative + h_cost, h_cost, np.ravel_multi_index(nxt, res), nxt),
                )
    return None, np.inf


def resample_arclength(polyline: np.ndarray, count: int) -> np.ndarray:
    deltas = np.linalg.norm(np.diff(polyline, axis=0), axis=-1)
    arc = np.concatenate([[0.0], np.cumsum(deltas)])
    if arc[-1] == 0.0:
        return np.tile(polyline[0], (count, 1))
    targets = np.linspace(0.0, arc[-1], count)
    return np.stack([np.interp(targets, arc, polyline[:, k]) for k in range(3)], axis=-1)


def astar_init(
    field,
    start,
    goal,
    config: PlannerConfig,
    planar: bool = False,
) -> Tuple[np.ndarray, bool]:
    """Coarse-grid A* path resampled to horizon+1 waypoints.

    Returns (waypoints, used_fallback); the fallback is the straight
    segment, used when the grid contains no free path.  With planar=True
    the search stays in the start point's z plane.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if float(field.density(start)) > config.occupancy_threshold or float(
        field.density(goal)
    ) > config.occupancy_threshold:
        raise StartOrGoalOccupied("endpoint density exceeds the occupancy threshold")

    lo = np.asarray(field.bounds_lo, dtype=float)
    hi = np.asarray(field.bounds_hi, dtype=float)
    res = np.full(3, config.grid_resolution, dtype=int)
    if planar:
        res[2] = 1
    cell = (hi - lo) / res

    centers = [lo[k] + (np.arange(res[k]) + 0.5) * cell[k] for k in range(3)]
    if planar:
        centers[2] = np.array([start[2]])
    grid_pts = np.stack(np.meshgrid(*centers, indexing="ij"), axis=-1)
    occupied = field.density(grid_pts) > config.occupancy_threshold

    def to_cell(point):
        idx = np.floor((point - lo) / cell).astype(int)
        return tuple(np.clip(idx, 0, res - 1))

    start_cell, goal_cell = to_cell(start), to_cell(goal)
    # The endpoints themselves are free; treat their cells as passable so
    # coarse grids cannot wall them in.
    occupied[start_cell] = False
    occupied[goal_cell] = False

    scale = np.where(cell > 0, cell, 1.0)
    cells, _ = grid_search(occupied, start_cell, goal_cell, scale)
    if cells is None:
        waypoints = np.linspace(start, goal, config.horizon + 1)
        return waypoints, True

    polyline = np.concatenate(
        [
            start[None, :],
            np.array([[centers[k][c[k]] for k in range(3)] for c in cells[1:-1]]).reshape(-1, 3),
            goal[None, :],
        ]
    )
    return resample_arclength(polyline, config.horizon + 1), False


def initial_trajectory(
    field,
    start,
    goal,
    config: PlannerConfig,
    robot: Optional[dyn.RobotModel] = None,
    start_velocity=None,
    start_yaw: Optional[float] = None,
) -> Tuple[dyn.FlatTrajectory, bool]:
    """A* waypoints with yaw initialized to face the direction of travel."""
    robot = dyn.RobotModel() if robot is None else robot
    waypoints, fallback = astar_init(
        field, start, goal, config, planar=robot.kind == "planar"
    )
    tangents = np.diff(waypoints, axis=0)
    yaws = np.zeros(config.horizon + 1)
    previous = 0.0 if start_yaw is None else float(start_yaw)
    for tau in range(config.horizon + 1):
        step = tangents[min(tau, len(tangents) - 1)]
        if np.linalg.norm(step[:2]) > 1e-9:
            raw = np.arctan2(step[1], step[0])
            # Stay on the turn branch nearest the previous yaw.
            previous = previous + dyn.wrap_angle(raw - previous)
        yaws[tau] = previous
    if start_yaw is not None:
        yaws[0] = float(start_yaw)
    velocity = np.zeros(3) if start_velocity is None else np.asarray(start_velocity, float)
    traj = dyn.FlatTrajectory(waypoints, yaws, config.dt, start_velocity=velocity)
    return traj, fallback


# -- optimizer -------------------------------------------------------------------------


def _pack(traj: dyn.FlatTrajectory, planar: bool) -> np.ndarray:
    interior = traj.positions[1:-1]
    yaws = np.unwrap(traj.yaws)[1:-1]
    coords = interior[:, :2] if planar else interior
    return np.concatenate([coords.ravel(), yaws])


def _unpack(x, traj: dyn.FlatTrajectory, planar: bool):
    """Extended flat outputs with interior entries taken from x (jet-aware)."""
    h = traj.horizon
    n = h - 1
    per = 2 if planar else 3
    coords = ad.reshape(x[: per * n], (n, per))
    if planar:
        z_col = np.full((n, 1), traj.positions[0, 2])
        coords = ad.concatenate([coords, z_col], axis=-1)
    yaws_all = np.unwrap(traj.yaws)
    virtual_pos = traj.positions[0] - traj.start_velocity * traj.dt
    virtual_yaw = yaws_all[0] - traj.start_yaw_rate * traj.dt
    head = np.stack([virtual_pos, traj.positions[0]])
    positions_ext = ad.concatenate([head, coords, traj.positions[-1:]], axis=0)
    yaws_ext = ad.concatenate(
        [np.array([virtual_yaw, yaws_all[0]]), x[per * n :], yaws_all[-1:]], axis=0
    )
    return positions_ext, yaws_ext


def optimize(
    traj0: dyn.FlatTrajectory,
    field,
    body: dyn.BodyModel,
    config: PlannerConfig,
    robot: Optional[dyn.RobotModel] = None,
    warm: bool = False,
    callback: Optional[Callable] = None,
) -> PlanResult:
    """Adam over interior waypoints; returns the best iterate seen.

    Non-finite costs mid-run abort the loop and return the best iterate
    with ``aborted`` set; a non-finite initial cost raises NonFiniteCost.
    ``callback(iteration, trajectory)`` sees each iterate in the same
    order as the cost traces.
    """
    robot = dyn.RobotModel() if robot is None else robot
    planar = robot.kind == "planar"
    gamma_vec = _gamma_diagonal(config.gamma, robot.control_dim)
    iterations = config.warm_iterations if warm else config.iterations

    x = _pack(traj0, planar)
    moment = np.zeros_like(x)
    second = np.zeros_like(x)
    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def evaluate(vec, with_gradient):
        if with_gradient and not config.use_finite_differences:
            jet = ad.Jet.variable(vec)
            pos_ext, yaw_ext = _unpack(jet, traj0, planar)
            collision, effort = _objective_terms(
                pos_ext, yaw_ext, traj0.dt, field, body, robot, gamma_vec
            )
            total = collision + effort
            return float(collision.val), float(effort.val), total.tan.copy()
        pos_ext, yaw_ext = _unpack(vec, traj0, planar)
        collision, effort = _objective_terms(
            pos_ext, yaw_ext, traj0.dt, field, body, robot, gamma_vec
        )
        gradient = None
        if with_gradient:
            gradient = np.zeros_like(vec)
            step = 1e-4
            for j in range(len(vec)):
                probe = vec.copy()
                probe[j] += step
                up = np.sum(_eval_total(probe, traj0, planar, field, body, robot, gamma_vec))
                probe[j] -= 2 * step
                down = np.sum(_eval_total(probe, traj0, planar, field, body, robot, gamma_vec))
                gradient[j] = (up - down) / (2 * step)
        return float(collision), float(effort), gradient

    collision_trace, control_trace = [], []
    best_x, best_cost = x.copy(), np.inf
    aborted = None
    iterations_run = 0
    for it in range(iterations):
        collision, effort, gradient = evaluate(x, with_gradient=True)
        total = collision + effort
        if not np.isfinite(total) or not np.all(np.isfinite(gradient)):
            if it == 0:
                raise NonFiniteCost("objective non-finite at the initial iterate")
            aborted = "non_finite_cost"
            break
        collision_trace.append(collision)
        control_trace.append(effort)
        iterations_run = it + 1
        if callback is not None:
            callback(it, _trajectory_from_vector(x, traj0, planar))
        if total < best_cost:
            best_cost, best_x = total, x.copy()
        moment = beta1 * moment + (1 - beta1) * gradient
        second = beta2 * second + (1 - beta2) * gradient * gradient
        m_hat = moment / (1 - beta1 ** (it + 1))
        v_hat = second / (1 - beta2 ** (it + 1))
        x = x - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    final_collision, final_effort, _ = evaluate(best_x, with_gradient=False)
    if final_collision + final_effort < best_cost:
        best_cost = final_collision + final_effort
    if not collision_trace:  # zero-iteration warm pass still reports a cost
        collision_trace.append(final_collision)
        control_trace.append(final_effort)
    trajectory = _trajectory_from_vector(best_x, traj0, planar)
    pairs = dyn.derive_states(trajectory, robot)
    return PlanResult(
        trajectory=trajectory,
        states=[state for state, _ in pairs],
        controls=np.stack([control for _, control in pairs]),
        collision_trace=np.asarray(collision_trace),
        control_trace=np.asarray(control_trace),
        iterations_run=iterations_run,
        aborted=aborted,
    )


def _eval_total(vec, traj0, planar, field, body, robot, gamma_vec):
    pos_ext, yaw_ext = _unpack(vec, traj0, planar)
    collision, effort = _objective_terms(
        pos_ext, yaw_ext, traj0.dt, field, body, robot, gamma_vec
    )
    return collision + effort


def objective_gradient(
    traj: dyn.FlatTrajectory,
    field,
    body: dyn.BodyModel,
    config: PlannerConfig,
    robot: Optional[dyn.RobotModel] = None,
) -> np.ndarray:
    """Gradient of J at the trajectory's interior variables (jets)."""
    robot = dyn.RobotModel() if robot is None else robot
    planar = robot.kind == "planar"
    gamma_vec = _gamma_diagonal(config.gamma, robot.control_dim)
    jet = ad.Jet.variable(_pack(traj, planar))
    pos_ext, yaw_ext = _unpack(jet, traj, planar)
    collision, effort = _objective_terms(
        pos_ext, yaw_ext, traj.dt, field, body, robot, gamma_vec
    )
    return (collision + effort).tan.copy()


def _trajectory_from_vector(x, traj0, planar):
    h = traj0.horizon
    n = h - 1
    per = 2 if planar else 3
    coords = x[: per * n].reshape(n, per)
    if planar:
        coords = np.concatenate(
            [coords, np.full((n, 1), traj0.positions[0, 2])], axis=-1
        )
    positions = np.concatenate([traj0.positions[:1], coords, traj0.positions[-1:]])
    yaws_all = np.unwrap(traj0.yaws)
    yaws = np.concatenate([yaws_all[:1], x[per * n :], yaws_all[-1:]])
    return dyn.FlatTrajectory(
        positions,
        yaws,
        traj0.dt,
        start_velocity=traj0.start_velocity,
        start_yaw_rate=traj0.start_yaw_rate,
    )


# -- serialization ----------------------------------------------------------------------


def plan_to_json(result: PlanResult) -> dict:
    return {
        "dt": result.trajectory.dt,
        "waypoints": result.trajectory.positions.tolist(),
        "yaws": result.trajectory.yaws.tolist(),
        "start_velocity": result.trajectory.start_velocity.tolist(),
        "start_yaw_rate": result.trajectory.start_yaw_rate,
        "states": [
            {
                "position": state.position.tolist(),
                "velocity": state.velocity.tolist(),
                "rotation": state.rotation.tolist(),
                "angular_velocity": state.angular_velocity.tolist(),
            }
            for state in result.states
        ],
        "controls": result.controls.tolist(),
        "collision_trace": result.collision_trace.tolist(),
        "control_trace": result.control_trace.tolist(),
        "iterations_run": result.iterations_run,
        "aborted": result.aborted,
    }


def save_plan(path, result: PlanResult) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(plan_to_json(result), handle, indent=2)


def load_plan(path) -> dict:
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def save_plan_csv(path, result: PlanResult) -> None:
    """One row per timestep: time, waypoint, yaw, velocity, controls."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        dim = result.controls.shape[1]
        writer.writerow(
            ["tau", "t", "x", "y", "z", "yaw", "vx", "vy", "vz"]
            + [f"u{k}" for k in range(dim)]
        )
        for tau, state in enumerate(result.states):
            writer.writerow(
                [tau, tau * result.trajectory.dt]
                + list(result.trajectory.positions[tau])
                + [result.trajectory.waypoint(tau).yaw]
                + list(state.velocity)
                + list(result.controls[tau])
            )
