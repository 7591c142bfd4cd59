"""Acceptance suite: one test per headline requirement.

Each test pins its quantitative bar inline and runs deterministically,
so the pass/fail line per test is the whole report.  Budgeted wall-clock
limits are asserted where the requirement names one.
"""

import dataclasses
import time

import numpy as np
from scipy import stats

import fieldnav.baselines as bl
import fieldnav.cli as cli
import fieldnav.dynamics as dyn
import fieldnav.estimator as est
import fieldnav.field as fld
import fieldnav.geom as geom
import fieldnav.planner as plan_mod
import fieldnav.render as render
import fieldnav.sim as sim

GRAV = 9.81


# -- shared doubles ----------------------------------------------------------------


class UniformMedium:
    """Constant density and color inside generous bounds."""

    def __init__(self, rho, color):
        self.rho = rho
        self.rgb = np.asarray(color, dtype=float)
        self.background = np.zeros(3)
        self.bounds_lo = np.full(3, -100.0)
        self.bounds_hi = np.full(3, 100.0)

    def density(self, points):
        return np.full(np.asarray(points).shape[:-1], self.rho)

    def density_gradient(self, points):
        return np.zeros(np.asarray(points).shape)

    def color(self, points, directions):
        return np.broadcast_to(self.rgb, np.asarray(points).shape[:-1] + (3,)).copy()


def circle_trajectory(radius, rate, dt, horizon):
    t = np.arange(horizon + 1) * dt
    positions = np.stack(
        [radius * np.cos(rate * t), radius * np.sin(rate * t), np.ones_like(t)],
        axis=-1,
    )
    start_velocity = radius * rate * np.array([0.0, 1.0, 0.0])
    return dyn.FlatTrajectory(positions, np.zeros_like(t), dt, start_velocity=start_velocity)


def straight_line(start, goal, horizon, dt):
    return dyn.FlatTrajectory(
        np.linspace(start, goal, horizon + 1),
        np.zeros(horizon + 1),
        dt,
        start_velocity=(goal - start) / (horizon * dt),
    )


def flat_plate_robot(grid=(5, 5, 1)):
    return dyn.RobotModel(
        kind="planar",
        bbox_half_extents=np.array([0.1, 0.1, 0.02]),
        grid_resolution=grid,
    )


# -- 1. pose algebra ----------------------------------------------------------------


def test_pose_algebra_round_trip_axioms_and_noncommutativity():
    # Bars: exp/log round trip <= 1e-8, group axioms <= 1e-9, a
    # non-commutation witness > 1e-6, >= 1000 sampled cases, < 5 s.
    started = time.perf_counter()
    rng = np.random.default_rng(20260815)
    cases = 1000
    identity = geom.Pose.identity()
    worst_round_trip = 0.0
    worst_axiom = 0.0
    best_witness = 0.0
    for _ in range(cases):
        # Round trip exercises rotation angles up to 3.0 rad (shy of the
        # branch cut); composed twists stay small enough to avoid it.
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        delta = np.concatenate([axis * rng.uniform(0.0, 3.0), rng.normal(size=3)])
        worst_round_trip = max(
            worst_round_trip, np.max(np.abs(geom.log(geom.exp(delta)) - delta))
        )

        small = rng.normal(scale=0.4, size=(3, 6))
        a, b, c = (geom.exp(d) for d in small)
        left = geom.compose(geom.compose(a, b), c)
        right = geom.compose(a, geom.compose(b, c))
        inv = geom.compose(a, geom.inverse(a))
        for got, want in (
            (left.rotation, right.rotation),
            (left.translation, right.translation),
            (geom.compose(a, identity).rotation, a.rotation),
            (geom.compose(a, identity).translation, a.translation),
            (inv.rotation, np.eye(3)),
            (inv.translation, np.zeros(3)),
            (a.rotation.T @ a.rotation, np.eye(3)),
        ):
            worst_axiom = max(worst_axiom, np.max(np.abs(got - want)))

        bch_gap = geom.log(geom.compose(geom.exp(small[0]), geom.exp(small[1])))
        best_witness = max(
            best_witness, np.linalg.norm(bch_gap - (small[0] + small[1]))
        )
    elapsed = time.perf_counter() - started
    assert worst_round_trip <= 1e-8
    assert worst_axiom <= 1e-9
    assert best_witness > 1e-6
    assert elapsed < 5.0


# -- 2. renderer oracles ------------------------------------------------------------


def test_renderer_matches_analytic_oracles():
    # Bars: uniform-medium pixel within 1% of c*(1-exp(-rho*L)) at 256
    # samples; per-pixel weights sum <= 1 on a full 100x100 image;
    # pose derivatives within 1e-2 of central differences; < 60 s.
    started = time.perf_counter()
    rho, length = 0.7, 4.0
    medium = UniformMedium(rho, color=(0.9, 0.4, 0.2))
    ray = render.Ray(np.zeros(3), np.array([0.0, 0.0, -1.0]), t_near=0.0, t_far=length)
    got = render.render_pixel(medium, ray, n_samples=256)
    expected = medium.rgb * (1.0 - np.exp(-rho * length))
    np.testing.assert_allclose(got, expected, rtol=0.01)

    scene = fld.AnalyticScene(
        [
            fld.Sphere(center=[0.0, 0.0, -3.0], radius=1.0, rho_max=20.0, beta=0.05,
                       albedo=[0.9, 0.6, 0.3]),
            fld.Box(center=[1.2, 0.5, -4.0], half_extents=[0.6, 0.6, 0.6],
                    rho_max=15.0, beta=0.05, albedo=[0.2, 0.5, 0.8]),
        ],
        bounds_lo=[-5.0, -5.0, -8.0],
        bounds_hi=[5.0, 5.0, 5.0],
        background=(0.1, 0.1, 0.1),
    )
    camera = render.Camera(width=100, height=100, fx=100.0, fy=100.0)
    pose = geom.Pose.identity()
    _, residual = render.render_pixels(
        scene, camera, pose, np.arange(camera.n_pixels), n_samples=128, seed=5, t_far=8.0
    )
    weight_sums = 1.0 - residual
    assert residual.min() >= -1e-12
    assert weight_sums.max() <= 1.0 + 1e-12

    probe = geom.Pose(geom.rotz(0.2), np.array([0.3, -0.2, 0.5]))
    pixels = np.array([4040, 3131, 4949, 1313])
    _, jac = render.render_pixels_with_pose_jacobian(
        scene, camera, probe, pixels, n_samples=96, seed=11, t_far=7.0
    )
    step = 1e-4
    for m in range(6):
        delta = np.zeros(6)
        delta[m] = step
        plus, _ = render.render_pixels(
            scene, camera, geom.retract(probe, delta), pixels, 96, seed=11, t_far=7.0
        )
        minus, _ = render.render_pixels(
            scene, camera, geom.retract(probe, -delta), pixels, 96, seed=11, t_far=7.0
        )
        fd = (plus - minus) / (2.0 * step)
        significant = np.abs(jac[..., m]) > 1e-6
        np.testing.assert_allclose(jac[..., m][significant], fd[significant], rtol=1e-2)
    assert time.perf_counter() - started < 60.0


# -- 3. derived controls through the simulator --------------------------------------


def test_derived_controls_reproduce_waypoints_and_closed_forms():
    # Bars: noise-free integration of derived controls reproduces the
    # waypoints under a quadratic envelope across dt halvings, and the
    # interior thrust gap to the continuous closed form decays second
    # order; hover and fine-step circle closed forms match <= 1e-6.
    robot = dyn.RobotModel()
    radius, rate = 1.3, 0.8
    continuous = robot.mass * np.sqrt(GRAV**2 + rate**4 * radius**2)

    replay_errors, thrust_gaps = [], []
    for dt in (0.08, 0.04, 0.02):
        horizon = int(round(4.0 / dt))
        traj = circle_trajectory(radius, rate, dt, horizon)
        pairs = dyn.derive_states(traj, robot)
        state = dyn.execution_state(traj, robot)
        worst = 0.0
        for tau, (_, control) in enumerate(pairs[:-1]):
            state = dyn.simulate_step(state, control, dt, robot)
            worst = max(
                worst, np.linalg.norm(state.position - traj.positions[tau + 1])
            )
        replay_errors.append(worst)
        interior = [control[0] for _, control in pairs[1:-1]]
        thrust_gaps.append(abs(np.median(interior) - continuous))

    # The integration is an exact inverse, so each halving stays inside
    # the quadratic envelope of the previous error (floor: round-off).
    for coarse, fine in zip(replay_errors, replay_errors[1:]):
        assert fine <= max(coarse / 4.0, 1e-10)
    # The discrete-to-continuous thrust gap is the visible second-order
    # quantity: each dt halving divides it by ~4.
    for coarse, fine in zip(thrust_gaps, thrust_gaps[1:]):
        assert abs(coarse / fine - 4.0) < 1.2

    hover = dyn.FlatTrajectory(np.tile([0.4, -0.7, 1.1], (6, 1)), np.zeros(6), dt=0.05)
    for state, control in dyn.derive_states(hover, robot):
        np.testing.assert_allclose(control, [robot.mass * GRAV, 0.0, 0.0, 0.0], atol=1e-6)
        np.testing.assert_allclose(state.rotation, np.eye(3), atol=1e-6)

    fine_pairs = dyn.derive_states(circle_trajectory(radius, rate, 1e-3, 6), robot)
    assert abs(fine_pairs[3][1][0] - continuous) <= 1e-6


# -- 4. planner pushes a path out of a block -----------------------------------------


def test_planner_clears_block_obstacle():
    # Bars: final collision cost < 1% of the initial trajectory's, zero
    # ground-truth occupancy hits over all body points and steps, < 2 min.
    started = time.perf_counter()
    scene = fld.AnalyticScene(
        [fld.Box(center=[0.0, 0.0, 0.0], half_extents=[0.4, 0.4, 0.5], beta=0.05)],
        bounds_lo=np.full(3, -3.0),
        bounds_hi=np.full(3, 3.0),
    )
    robot = flat_plate_robot()
    body = dyn.make_body_model(robot)
    start = np.array([-1.5, 0.02, 0.0])
    goal = np.array([1.5, 0.02, 0.0])
    config = plan_mod.PlannerConfig(
        horizon=40, dt=0.1, gamma=1e-4, learning_rate=5e-3,
        iterations=1200, grid_resolution=12, seed=0,
    )
    traj0 = straight_line(start, goal, config.horizon, config.dt)
    initial_cost = plan_mod.collision_cost(traj0, scene, body, robot)
    result = plan_mod.optimize(traj0, scene, body, config, robot=robot)
    final_cost = plan_mod.collision_cost(result.trajectory, scene, body, robot)
    assert final_cost < 0.01 * initial_cost
    assert not bl.ground_truth_failure(result.trajectory, scene, body, robot)
    assert time.perf_counter() - started < 120.0


# -- 5. collision cost tracks true intersection volume -------------------------------


def test_collision_cost_rank_correlates_with_intersection_volume():
    # Bar: Spearman rank correlation between the optimizer's collision
    # cost and sampled ground-truth intersection volume > 0.8, checked
    # per draw and pooled over 20 scene/endpoint draws.  A denser grid
    # measures volume than the one the planner optimizes with, so the
    # two signals share no samples.
    rng = np.random.default_rng(0)
    robot = flat_plate_robot()
    body = dyn.make_body_model(robot)
    meter_robot = flat_plate_robot(grid=(9, 9, 1))
    meter_body = dyn.make_body_model(meter_robot)

    pooled_cost, pooled_volume, per_draw = [], [], []
    for _ in range(20):
        center = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.06, 0.06), 0.0])
        box = fld.Box(center=center, half_extents=np.array([0.35, 0.35, 0.42]), beta=0.05)
        scene = fld.AnalyticScene(
            (box,), bounds_lo=np.full(3, -3.0), bounds_hi=np.full(3, 3.0)
        )
        offset = rng.uniform(-0.1, 0.1)
        start = np.array([-1.5, offset, 0.0])
        goal = np.array([1.5, -offset, 0.0])
        config = plan_mod.PlannerConfig(
            horizon=24, dt=0.1, gamma=1e-4, learning_rate=5e-3,
            iterations=280, grid_resolution=12, seed=0,
        )
        volumes = []
        result = plan_mod.optimize(
            straight_line(start, goal, config.horizon, config.dt),
            scene, body, config, robot=robot,
            callback=lambda it, traj: volumes.append(
                plan_mod.intersection_volume(traj, scene, meter_body, meter_robot)
            ),
        )
        per_draw.append(stats.spearmanr(result.collision_trace, volumes).statistic)
        pooled_cost.extend(result.collision_trace)
        pooled_volume.extend(volumes)

    assert min(per_draw) > 0.8
    assert stats.spearmanr(pooled_cost, pooled_volume).statistic > 0.8


# -- 6. filter equals a Kalman filter on a linear double ------------------------------


def test_filter_matches_kalman_reference_on_linear_double():
    # Bar: predicted and posterior mean/covariance match the closed-form
    # Kalman recursion to 1e-6 when the measurement model is linear.
    robot = dyn.RobotModel(kind="planar")
    dt = 0.1
    rng = np.random.default_rng(77)
    sigma0 = np.diag(rng.uniform(0.05, 0.3, size=12))
    prior = est.Belief(dyn.FullState.rest([0.0, 0.0, 0.0]), sigma0)
    config = est.FilterConfig(
        process_noise=0.1,
        measurement_noise=1.0,
        gradient_steps=400,
        learning_rate_pose=0.1,
        learning_rate_velocity=0.1,
        outlier_quantile=1.0,
    )
    pred = est.propagate(prior, np.zeros(3), dt, robot, config)
    f_mat = np.eye(12)
    f_mat[3:6, 6:9] = dt * np.eye(3)
    f_mat[0:3, 9:12] = dt * np.eye(3)
    np.testing.assert_allclose(
        pred.covariance, f_mat @ sigma0 @ f_mat.T + 0.1 * np.eye(12), atol=1e-6
    )

    h_mat = np.zeros((4, 12))
    h_mat[:, 3:9] = rng.normal(size=(4, 6))
    z = 0.05 * rng.normal(size=4)

    def model(state):
        return h_mat @ dyn.state_difference(state, pred.mean) - z, h_mat

    post = est.update(pred, None, None, None, config, measurement_model=model)
    sigma_pred = pred.covariance
    gain = sigma_pred @ h_mat.T @ np.linalg.inv(h_mat @ sigma_pred @ h_mat.T + np.eye(4))
    np.testing.assert_allclose(
        dyn.state_difference(post.mean, pred.mean), gain @ z, atol=1e-6
    )
    np.testing.assert_allclose(
        post.covariance, (np.eye(12) - gain @ h_mat) @ sigma_pred, atol=1e-6
    )


# -- 11. navigate is deterministic ---------------------------------------------------


def test_navigate_runs_are_byte_identical(tmp_path):
    # Bar: two navigate runs with the same config and seed write
    # byte-identical run logs.
    scene = fld.AnalyticScene([], bounds_lo=np.full(3, -4.0), bounds_hi=np.full(3, 4.0))
    scene_path = tmp_path / "scene.json"
    fld.save_scene(scene, scene_path)
    robot = dyn.RobotModel(noise=dataclasses.replace(
        dyn.NoiseSpec.zero(), sigma_position=0.01, sigma_velocity=0.005))
    robot_path = tmp_path / "robot.json"
    dyn.save_robot(robot_path, robot)
    config = sim.RunConfig(
        scene_path=str(scene_path),
        robot_path=str(robot_path),
        start=dyn.FullState.rest(np.array([-1.0, 0.0, 0.0])),
        goal_position=np.array([0.6, 0.0, 0.0]),
        planner=plan_mod.PlannerConfig(
            horizon=12, dt=0.1, iterations=120, warm_iterations=30,
            grid_resolution=8, seed=0,
        ),
        filter=est.FilterConfig(
            pixel_budget=32, gradient_steps=6, render_samples=16,
            learning_rate_pose=1e-3, learning_rate_velocity=2e-3,
        ),
        camera=render.Camera(width=16, height=16, fx=16.0, fy=16.0),
        max_steps=25,
        goal_tolerance=0.1,
        master_seed=3,
    )
    config_path = tmp_path / "run.json"
    sim.save_run_config(config_path, config)
    logs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli.main(
            ["navigate", "--config", str(config_path), "--out-dir", str(out)]
        ) == 0
        logs.append((out / "runlog.jsonl").read_bytes())
    assert logs[0] == logs[1]
