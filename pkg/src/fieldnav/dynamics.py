"""Discrete differential flatness and the noisy rigid-body simulator.

Flat outputs are position and yaw sampled at a fixed timestep.  States
and controls are recovered with fixed finite-difference stencils:

* velocity: forward difference of positions,
* acceleration: central second difference, using a virtual waypoint
  ``sigma_{-1} = sigma_0 - v_0 dt`` so the pinned start velocity enters
  the first acceleration,
* body rates: forward difference of rotation logarithms,
* angular acceleration: backward difference of those body rates
  (equivalently a central second difference of attitude), with the
  gyroscopic term evaluated at the earlier rate,
* endpoints one-sided.

This exact alignment makes the control sequence the discrete inverse of
the semi-implicit Euler integrator in :func:`simulate_step`: integrating
the derived controls from the trajectory's pinned start state reproduces
the waypoints to machine precision, so the flatness-consistency error is
bounded by any power of dt.  The stencils themselves approximate the
continuous derivatives of a smooth path to second order.

Controls are plain arrays: quadrotor ``[thrust, tau_x, tau_y, tau_z]``
(thrust along the body z axis, torques in the body frame), planar
``[f_x, f_y, tau_z]`` (world-frame force on a ground robot, no gravity
term).  The state tangent is 12-dimensional ``[pose twist (6), dv (3),
domega (3)]`` with the pose block using the world-frame SE(3)
retraction from :mod:`fieldnav.geom`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from typing import List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import geom

GRAVITY_DEFAULT = 9.81
FREE_FALL_EPS = 1e-6


class FreeFallSingularity(ValueError):
    """Commanded acceleration cancels gravity: thrust direction undefined."""


@dataclass(frozen=True)
class NoiseSpec:
    """Additive zero-mean Gaussian noise applied after each step.

    Defaults follow the reference disturbance model: 2 cm translation,
    0.02 rad rotation, half those values for the respective rates.
    """

    sigma_position: float = 0.02
    sigma_rotation: float = 0.02
    sigma_velocity: float = 0.01
    sigma_angular: float = 0.01

    @staticmethod
    def zero() -> "NoiseSpec":
        return NoiseSpec(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FullState:
    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray
    angular_velocity: np.ndarray  # body frame

    def __post_init__(self):
        for name in ("position", "velocity", "rotation", "angular_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        values = np.concatenate(
            [self.position, self.velocity, self.rotation.ravel(), self.angular_velocity]
        )
        if not np.all(np.isfinite(values)):
            raise ValueError("state entries must be finite")
        if geom._drift(self.rotation) > 1e-6:
            raise ValueError("state rotation is not orthonormal")

    @staticmethod
    def rest(position, yaw: float = 0.0) -> "FullState":
        return FullState(np.asarray(position, dtype=float), np.zeros(3), geom.rotz(yaw), np.zeros(3))

    def pose(self) -> geom.Pose:
        return geom.Pose(self.rotation, self.position)


@dataclass(frozen=True)
class FlatWaypoint:
    position: np.ndarray
    yaw: float  # wrapped to (-pi, pi]


def wrap_angle(angle):
    return np.mod(np.asarray(angle) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class FlatTrajectory:
    """Flat-output samples sigma_0..sigma_h at a fixed timestep.

    The raw yaw sequence is kept unwrapped so difference stencils stay
    smooth; :meth:`waypoint` returns the wrapped view.
    """

    positions: np.ndarray  # (h+1, 3)
    yaws: np.ndarray  # (h+1,)
    dt: float
    start_velocity: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    start_yaw_rate: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float))
        object.__setattr__(self, "yaws", np.asarray(self.yaws, dtype=float))
        object.__setattr__(self, "start_velocity", np.asarray(self.start_velocity, dtype=float))
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (h+1, 3)")
        if self.yaws.shape != (self.positions.shape[0],):
            raise ValueError("need one yaw per waypoint")
        if self.horizon < 4:
            raise ValueError("need horizon h >= 4 for the difference stencils")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def horizon(self) -> int:
        return self.positions.shape[0] - 1

    def waypoint(self, tau: int) -> FlatWaypoint:
        return FlatWaypoint(self.positions[tau].copy(), float(wrap_angle(self.yaws[tau])))


@dataclass(frozen=True)
class BodyModel:
    """Body-frame collision-check points with per-point cell volume.

    The volume weights feed the ground-truth intersection-volume metric;
    the collision cost itself sums density times swept distance only.
    """

    points: np.ndarray  # (n, 3)
    cell_volume: np.ndarray  # (n,)

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "cell_volume", np.asarray(self.cell_volume, dtype=float))
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise ValueError("body model needs at least one point")


@dataclass(frozen=True)
class RobotModel:
    kind: str = "quadrotor"  # or "planar"
    mass: float = 1.0
    inertia: np.ndarray = dc_field(default_factory=lambda: np.diag([0.01, 0.01, 0.01]))
    gravity: float = GRAVITY_DEFAULT
    bbox_half_extents: np.ndarray = dc_field(default_factory=lambda: np.full(3, 0.05))
    grid_resolution: Tuple[int, int, int] = (5, 5, 3)
    noise: NoiseSpec = dc_field(default_factory=NoiseSpec)

    def __post_init__(self):
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.ndim == 1:
            inertia = np.diag(inertia)
        object.__setattr__(self, "inertia", inertia)
        object.__setattr__(
            self, "bbox_half_extents", np.asarray(self.bbox_half_extents, dtype=float)
        )
        if self.kind not in ("quadrotor", "planar"):
            raise ValueError(f"unknown robot kind {self.kind!r}")
        if self.mass <= 0:
            raise ValueError("mass must be positive")

    @property
    def control_dim(self) -> int:
        return 4 if self.kind == "quadrotor" else 3

    def hover_control(self) -> np.ndarray:
        if self.kind == "quadrotor":
            return np.array([self.mass * self.gravity, 0.0, 0.0, 0.0])
        return np.zeros(3)


def make_body_model(robot: RobotModel) -> BodyModel:
    """Uniform grid over the bounding box; weight = box volume / points."""
    nx, ny, nz = robot.grid_resolution
    hx, hy, hz = robot.bbox_half_extents
    axes = [np.linspace(-h, h, n) if n > 1 else np.zeros(1) for h, n in [(hx, nx), (hy, ny), (hz, nz)]]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    volume = 8.0 * hx * hy * hz
    return BodyModel(grid, np.full(len(grid), volume / len(grid)))


# -- flat-output chain (runs on arrays and jets alike) --------------------------


def _skew_stack(v):
    """Skew matrices for (..., 3) vectors, jet-aware."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = x * 0.0
    rows = [
        ad.stack([zero, -z, y], axis=-1),
        ad.stack([z, zero, -x], axis=-1),
        ad.stack([-y, x, zero], axis=-1),
    ]
    return ad.stack(rows, axis=-2)


def rodrigues(omega):
    """Batched SO(3) exponential for (..., 3) rotation vectors."""
    angle_sq = ad.sum(omega * omega, axis=-1)
    small = ad.value(angle_sq) < 1e-14
    k = _skew_stack(omega)
    kk = ad.matmul(k, k)
    eye = np.eye(3)
    # Safe angle avoids 0/0 in the closed-form branch; those lanes are
    # discarded by the final where.
    safe_sq = angle_sq + np.where(small, 1.0, 0.0)
    angle = ad.sqrt(safe_sq)
    a = ad.expand_dims(ad.expand_dims(ad.sin(angle) / angle, -1), -1)
    b = ad.expand_dims(ad.expand_dims((1.0 - ad.cos(angle)) / safe_sq, -1), -1)
    closed = a * k + b * kk + eye
    series = k + kk * 0.5 + eye
    return ad.where(small[..., None, None], series, closed)


def rotation_log(m):
    """Batched SO(3) logarithm for (..., 3, 3) rotations.

    Raises AngleNearPi for any element within 1e-6 of pi, matching the
    scalar convention in :mod:`fieldnav.geom`.
    """
    trace = m[..., 0, 0] + m[..., 1, 1] + m[..., 2, 2]
    cos_angle = np.clip((ad.value(trace) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if np.any(angle >= np.pi - 1e-6):
        raise geom.AngleNearPi("rotation angle within 1e-6 of pi")
    antisym = ad.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )
    small = angle < 1e-4
    safe_sin = np.where(small, 1.0, np.sin(angle))
    scale = np.where(small, 0.5, 0.5 * angle / safe_sin)
    if ad.is_jet(antisym):
        # Chain the scale factor through the trace.  Near identity the
        # scale derivative vanishes as O(angle); dropping it there keeps
        # the tangent finite with error below the gradient tolerances.
        dscale = np.where(
            small, 0.0, (safe_sin - angle * cos_angle) / (2.0 * safe_sin * safe_sin)
        )
        dangle = np.where(small, 0.0, -0.5 / safe_sin)
        trace_tan = trace.tan if ad.is_jet(trace) else np.zeros(angle.shape + (antisym.width,))
        scale_tan = (dscale * dangle)[..., None] * trace_tan
        scale_jet = ad.Jet(scale, scale_tan)
        return ad.expand_dims(scale_jet, -1) * antisym
    return scale[..., None] * antisym


def _unit(v):
    return v / ad.expand_dims(ad.norm(v, axis=-1), -1)


def _apply_matrix(matrix: np.ndarray, x):
    """Constant (3, 3) matrix applied to (..., 3) vectors, jet-aware."""
    if ad.is_jet(x):
        return ad.Jet(x.val @ matrix.T, np.einsum("ij,...jt->...it", matrix, x.tan))
    return x @ matrix.T


def flat_chain(positions_ext, yaws_ext, dt: float, robot: RobotModel):
    """States and controls from extended flat outputs (virtual sample first).

    positions_ext: (h+2, 3) = [sigma_{-1}, sigma_0, ..., sigma_h];
    yaws_ext: (h+2,).  Works on arrays or jets.  Returns a dict with
    velocity/acceleration (h+1, 3), rotations (h+1, 3, 3), body rates
    (h+1, 3), and controls (h+1, control_dim).
    """
    sigma = positions_ext[1:]  # (h+1, 3)

    vel_fwd = (sigma[1:] - sigma[:-1]) / dt  # (h, 3)
    velocity = ad.concatenate([vel_fwd, vel_fwd[-1:]], axis=0)

    # Central second differences for tau = 0..h-1, one-sided at tau = h.
    accel = (positions_ext[2:] - 2.0 * positions_ext[1:-1] + positions_ext[:-2]) / dt**2
    accel = ad.concatenate([accel, accel[-1:]], axis=0)

    yaw = yaws_ext[1:]
    if robot.kind == "planar":
        yaw_rate_fwd = (yaw[1:] - yaw[:-1]) / dt
        yaw_rate = ad.concatenate([yaw_rate_fwd, yaw_rate_fwd[-1:]], axis=0)
        yaw_acc = (yaws_ext[2:] - 2.0 * yaws_ext[1:-1] + yaws_ext[:-2]) / dt**2
        yaw_acc = ad.concatenate([yaw_acc, yaw_acc[-1:]], axis=0)
        zero = yaw * 0.0
        rotations = rodrigues(ad.stack([zero, zero, yaw], axis=-1))
        omega = ad.stack([zero, zero, yaw_rate], axis=-1)
        force = robot.mass * accel[:, :2]
        torque = robot.inertia[2, 2] * yaw_acc
        controls = ad.concatenate([force, ad.expand_dims(torque, -1)], axis=-1)
        return {
            "velocity": velocity,
            "acceleration": accel,
            "rotations": rotations,
            "omega": omega,
            "controls": controls,
        }

    thrust_vec = accel + np.array([0.0, 0.0, robot.gravity])
    thrust_mag = ad.norm(thrust_vec, axis=-1)
    if np.any(ad.value(thrust_mag) < FREE_FALL_EPS):
        raise FreeFallSingularity("acceleration cancels gravity; thrust direction undefined")
    z_b = _unit(thrust_vec)
    x_c = ad.stack([ad.cos(yaw), ad.sin(yaw), yaw * 0.0], axis=-1)
    y_b = _unit(ad.cross(z_b, x_c))
    x_b = ad.cross(y_b, z_b)
    rotations = ad.stack([x_b, y_b, z_b], axis=-1)  # columns are the body axes

    rel = ad.matmul(ad.transpose_matrix(rotations[:-1]), rotations[1:])
    omega_fwd = rotation_log(rel) / dt  # (h, 3)
    omega = ad.concatenate([omega_fwd, omega_fwd[-1:]], axis=0)

    # Backward difference of the forward-difference rates, gyroscopic
    # term at the earlier rate: the exact inverse of the semi-implicit
    # integrator's angular update.  One-sided at tau = 0.
    omega_prev = ad.concatenate([omega[:1], omega[:-1]], axis=0)
    alpha = (omega - omega_prev) / dt
    inertia = robot.inertia
    torque = _apply_matrix(inertia, alpha) + ad.cross(
        omega_prev, _apply_matrix(inertia, omega_prev)
    )
    thrust = robot.mass * thrust_mag
    controls = ad.concatenate([ad.expand_dims(thrust, -1), torque], axis=-1)
    return {
        "velocity": velocity,
        "acceleration": accel,
        "rotations": rotations,
        "omega": omega,
        "controls": controls,
    }


def extend_flat_outputs(traj: FlatTrajectory):
    """Prepend the virtual sample that pins the start velocity."""
    virtual_pos = traj.positions[0] - traj.start_velocity * traj.dt
    virtual_yaw = traj.yaws[0] - traj.start_yaw_rate * traj.dt
    yaws = np.unwrap(traj.yaws)
    positions_ext = np.concatenate([virtual_pos[None, :], traj.positions], axis=0)
    yaws_ext = np.concatenate([[virtual_yaw], yaws])
    return positions_ext, yaws_ext


def derive_states(traj: FlatTrajectory, robot: RobotModel) -> List[Tuple[FullState, np.ndarray]]:
    """Full states and controls at every waypoint (see module docstring)."""
    positions_ext, yaws_ext = extend_flat_outputs(traj)
    chain = flat_chain(positions_ext, yaws_ext, traj.dt, robot)
    out = []
    for tau in range(traj.horizon + 1):
        state = FullState(
            traj.positions[tau],
            chain["velocity"][tau],
            geom.orthonormalize(chain["rotations"][tau]),
            chain["omega"][tau],
        )
        out.append((state, chain["controls"][tau].copy()))
    return out


def derive_states_planar(traj: FlatTrajectory, robot: RobotModel):
    if robot.kind != "planar":
        raise ValueError("derive_states_planar needs a planar robot")
    return derive_states(traj, robot)


def execution_state(traj: FlatTrajectory, robot: RobotModel) -> FullState:
    """The start state from which the derived controls replay exactly.

    It pairs the first waypoint with the configured start velocity and
    the flat chain's initial attitude and body rate; a state with any
    other attitude cannot realize the head acceleration.
    """
    state0, _ = derive_states(traj, robot)[0]
    return FullState(
        traj.positions[0], traj.start_velocity, state0.rotation, state0.angular_velocity
    )


def tracking_control(
    state: FullState, target_position, target_rotation, dt: float, robot: RobotModel
) -> np.ndarray:
    """One-step control that steers toward the next waypoint pose.

    Exactly inverts the semi-implicit integrator: on a flat trajectory
    (state = execution state at tau) it reproduces the derived
    feedforward control; off the trajectory the unreachable part of the
    demanded acceleration is dropped along the current thrust axis.
    """
    target_position = np.asarray(target_position, dtype=float)
    velocity_needed = (target_position - state.position) / dt
    accel_needed = (velocity_needed - state.velocity) / dt
    if robot.kind == "quadrotor":
        thrust_vec = robot.mass * (accel_needed + np.array([0.0, 0.0, robot.gravity]))
        thrust = max(float(thrust_vec @ state.rotation[:, 2]), 0.0)
        rel = state.rotation.T @ np.asarray(target_rotation, dtype=float)
        omega_needed = rotation_log(rel) / dt
        spin = state.angular_velocity
        torque = robot.inertia @ (omega_needed - spin) / dt + np.cross(
            spin, robot.inertia @ spin
        )
        return np.concatenate([[thrust], torque])
    force = robot.mass * accel_needed[:2]
    yaw_gap = wrap_angle(geom.yaw_of(np.asarray(target_rotation, dtype=float)) - geom.yaw_of(state.rotation))
    omega_needed_z = float(yaw_gap) / dt
    torque_z = robot.inertia[2, 2] * (omega_needed_z - state.angular_velocity[2]) / dt
    return np.array([force[0], force[1], torque_z])


def swept_distance(state_a: FullState, state_b: FullState, body: BodyModel) -> np.ndarray:
    """Per-point travel distance between consecutive states."""
    before = body.points @ state_a.rotation.T + state_a.position
    after = body.points @ state_b.rotation.T + state_b.position
    return np.linalg.norm(after - before, axis=-1)


# -- simulator -------------------------------------------------------------------


def _step_core(position, velocity, rotation, omega, control, dt: float, robot: RobotModel):
    """One noise-free semi-implicit Euler step; array- and jet-capable.

    Velocities update first from forces and torques, then poses update
    with the new velocities.
    """
    if robot.kind == "quadrotor":
        body_z = ad.stack([rotation[..., 0, 2], rotation[..., 1, 2], rotation[..., 2, 2]], axis=-1)
        accel = body_z * ad.expand_dims(control[..., 0] / robot.mass, -1) - np.array(
            [0.0, 0.0, robot.gravity]
        )
        torque = ad.stack([control[..., 1], control[..., 2], control[..., 3]], axis=-1)
    else:
        zero = control[..., 0] * 0.0
        accel = ad.stack([control[..., 0], control[..., 1], zero], axis=-1) / robot.mass
        torque = ad.stack([zero, zero, control[..., 2]], axis=-1)
    inertia = robot.inertia
    inv_inertia = np.linalg.inv(inertia)
    gyro = ad.cross(omega, _apply_matrix(inertia, omega))
    new_velocity = velocity + accel * dt
    new_omega = omega + _apply_matrix(inv_inertia, torque - gyro) * dt
    new_position = position + new_velocity * dt
    increment = rodrigues(new_omega * dt)
    new_rotation = ad.matmul(rotation, increment)
    return new_position, new_velocity, new_rotation, new_omega


def simulate_step(
    state: FullState,
    control: np.ndarray,
    dt: float,
    robot: RobotModel,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[NoiseSpec] = None,
) -> FullState:
    """Advance one timestep; Gaussian state noise is added when rng is given.

    Noise draws are consumed in a fixed order (position, rotation,
    velocity, angular velocity; three normals each) so runs are
    reproducible from the generator state.
    """
    control = np.asarray(control, dtype=float)
    if control.shape != (robot.control_dim,):
        raise ValueError(f"expected control shape ({robot.control_dim},)")
    position, velocity, rotation, omega = _step_core(
        state.position, state.velocity, state.rotation, state.angular_velocity, control, dt, robot
    )
    if geom._drift(rotation) > geom.ORTHONORMAL_TOL:
        rotation = geom.orthonormalize(rotation)
    if rng is not None:
        spec = robot.noise if noise is None else noise
        draws = rng.normal(size=12)
        position = position + spec.sigma_position * draws[0:3]
        rotation = geom.compose(
            geom.Pose(geom.so3_exp(spec.sigma_rotation * draws[3:6]), np.zeros(3)),
            geom.Pose(rotation, np.zeros(3)),
        ).rotation
        velocity = velocity + spec.sigma_velocity * draws[6:9]
        omega = omega + spec.sigma_angular * draws[9:12]
    return FullState(position, velocity, rotation, omega)


# -- state tangent space -----------------------------------------------------------


STATE_DIM = 12


def state_retract(state: FullState, delta: np.ndarray) -> FullState:
    """Apply a 12-vector tangent step [pose twist, dv, domega]."""
    delta = np.asarray(delta, dtype=float)
    if delta.shape != (STATE_DIM,):
        raise ValueError("state tangent must have 12 entries")
    pose = geom.retract(state.pose(), delta[0:6])
    return FullState(
        pose.translation,
        state.velocity + delta[6:9],
        pose.rotation,
        state.angular_velocity + delta[9:12],
    )


def state_difference(state_a: FullState, state_b: FullState) -> np.ndarray:
    """Tangent vector with state_retract(state_b, out) == state_a."""
    twist = geom.difference(state_a.pose(), state_b.pose())
    return np.concatenate(
        [
            twist,
            state_a.velocity - state_b.velocity,
            state_a.angular_velocity - state_b.angular_velocity,
        ]
    )


def dynamics_jacobian(
    state: FullState, control: np.ndarray, dt: float, robot: RobotModel
) -> np.ndarray:
    """12x12 derivative of one noise-free step in the state tangent space.

    Row/column order matches state_retract: pose twist (6), velocity (3),
    angular velocity (3).  Computed by pushing the 12 tangent directions
    through the step with forward-mode jets.
    """
    control = np.asarray(control, dtype=float)
    delta = ad.Jet.variable(np.zeros(STATE_DIM))
    rot_delta = rodrigues(ad.stack([delta[0], delta[1], delta[2]], axis=-1))
    trans_delta = _left_jacobian_apply(
        ad.stack([delta[0], delta[1], delta[2]], axis=-1),
        ad.stack([delta[3], delta[4], delta[5]], axis=-1),
    )
    rotation = ad.matmul(rot_delta, state.rotation)
    position = _matvec(rot_delta, state.position) + trans_delta
    velocity = ad.stack([delta[6], delta[7], delta[8]], axis=-1) + state.velocity
    omega = ad.stack([delta[9], delta[10], delta[11]], axis=-1) + state.angular_velocity

    new_p, new_v, new_r, new_w = _step_core(
        position, velocity, rotation, omega, control, dt, robot
    )
    base_p, base_v, base_r, base_w = _step_core(
        state.position, state.velocity, state.rotation, state.angular_velocity, control, dt, robot
    )

    rel_rot = ad.matmul(new_r, base_r.T)
    dtheta = rotation_log(rel_rot)
    # Pose-twist translation component of log(T_new T_base^{-1}): at zero
    # perturbation V(theta) = I, so the tangent is d(p_new - R_rel p_base).
    dtrans = new_p - _matvec(rel_rot, base_p)
    rows = ad.concatenate([dtheta, dtrans, new_v - base_v, new_w - base_w], axis=-1)
    return rows.tan.copy()


def _matvec(matrix, vector):
    """(..., 3, 3) @ (..., 3) for arrays or jets."""
    cols = [matrix[..., 0], matrix[..., 1], matrix[..., 2]]
    if ad.is_jet(vector) or ad.is_jet(matrix):
        comps = [cols[j] * ad.expand_dims(_component(vector, j), -1) for j in range(3)]
        return comps[0] + comps[1] + comps[2]
    return np.einsum("...ij,...j->...i", matrix, vector)


def _component(vector, index):
    return vector[..., index]


def _left_jacobian_apply(theta, v):
    """V(theta) v with the SO(3) left Jacobian, jet-capable, batched."""
    angle_sq = ad.sum(theta * theta, axis=-1)
    small = ad.value(angle_sq) < 1e-14
    k = _skew_stack(theta)
    kk = ad.matmul(k, k)
    safe_sq = angle_sq + np.where(small, 1.0, 0.0)
    angle = ad.sqrt(safe_sq)
    b = (1.0 - ad.cos(angle)) / safe_sq
    c = (angle - ad.sin(angle)) / (safe_sq * angle)
    closed = k * ad.expand_dims(ad.expand_dims(b, -1), -1) + kk * ad.expand_dims(
        ad.expand_dims(c, -1), -1
    ) + np.eye(3)
    series = np.eye(3) + k * 0.5 + kk * (1.0 / 6.0)
    v_mat = ad.where(small[..., None, None], series, closed)
    return _matvec(v_mat, v)


# -- serialization ------------------------------------------------------------------


def robot_to_json(robot: RobotModel) -> dict:
    return {
        "kind": robot.kind,
        "mass": robot.mass,
        "inertia": np.diag(robot.inertia).tolist(),
        "gravity": robot.gravity,
        "bbox_half_extents": robot.bbox_half_extents.tolist(),
        "grid_resolution": list(robot.grid_resolution),
        "noise": {
            "sigma_position": robot.noise.sigma_position,
            "sigma_rotation": robot.noise.sigma_rotation,
            "sigma_velocity": robot.noise.sigma_velocity,
            "sigma_angular": robot.noise.sigma_angular,
        },
    }


def robot_from_json(payload: dict) -> RobotModel:
    noise = payload.get("noise", {})
    return RobotModel(
        kind=payload.get("kind", "quadrotor"),
        mass=float(payload.get("mass", 1.0)),
        inertia=np.asarray(payload.get("inertia", [0.01, 0.01, 0.01]), dtype=float),
        gravity=float(payload.get("gravity", GRAVITY_DEFAULT)),
        bbox_half_extents=np.asarray(payload.get("bbox_half_extents", [0.05] * 3), dtype=float),
        grid_resolution=tuple(payload.get("grid_resolution", (5, 5, 3))),
        noise=NoiseSpec(
            sigma_position=float(noise.get("sigma_position", 0.02)),
            sigma_rotation=float(noise.get("sigma_rotation", 0.02)),
            sigma_velocity=float(noise.get("sigma_velocity", 0.01)),
            sigma_angular=float(noise.get("sigma_angular", 0.01)),
        ),
    )


def state_to_json(state: FullState) -> dict:
    return {
        "position": state.position.tolist(),
        "velocity": state.velocity.tolist(),
        "rotation": state.rotation.tolist(),
        "angular_velocity": state.angular_velocity.tolist(),
    }


def state_from_json(payload: dict) -> FullState:
    return FullState(
        position=np.asarray(payload["position"], dtype=float),
        velocity=np.asarray(payload["velocity"], dtype=float),
        rotation=np.asarray(payload["rotation"], dtype=float),
        angular_velocity=np.asarray(payload["angular_velocity"], dtype=float),
    )


def save_robot(path, robot: RobotModel) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(robot_to_json(robot), handle, indent=2)


def load_robot(path) -> RobotModel:
    with open(path, "r", encoding="utf-8") as handle:
        return robot_from_json(json.load(handle))
