import numpy as np
import pytest

import fieldnav.baselines as bl
import fieldnav.dynamics as dyn
import fieldnav.field as fld
import fieldnav.planner as plan_mod


def waypoint(x, y, z, yaw=0.0):
    return dyn.FlatWaypoint(np.array([x, y, z], dtype=float), yaw)


def empty_scene(extent=2.0):
    return fld.AnalyticScene(
        [], bounds_lo=np.full(3, -extent), bounds_hi=np.full(3, extent)
    )


def offset_gap_scene():
    """Two wall slabs with a free corridor around y = 1, away from y = 0."""
    walls = [
        fld.Box(center=[0.0, -0.65, 0.0], half_extents=[0.1, 1.35, 2.0], beta=0.02),
        fld.Box(center=[0.0, 1.85, 0.0], half_extents=[0.1, 0.15, 2.0], beta=0.02),
    ]
    return fld.AnalyticScene(
        walls, bounds_lo=np.full(3, -2.0), bounds_hi=np.full(3, 2.0)
    )


# -- minimum snap ------------------------------------------------------------------


def test_min_snap_two_waypoints_matches_rest_to_rest_closed_form():
    segs = bl.min_snap([waypoint(0, 0, 0), waypoint(1, 0, 0)], segment_times=[1.0])
    assert len(segs) == 1
    tau = np.linspace(0.0, 1.0, 257)
    values = bl.evaluate_spline(segs, tau)[:, 0]
    closed = 35 * tau**4 - 84 * tau**5 + 70 * tau**6 - 20 * tau**7
    np.testing.assert_allclose(values, closed, atol=1e-6)
    # Other axes carry no motion.
    assert np.abs(bl.evaluate_spline(segs, tau)[:, 1:]).max() < 1e-9


def test_min_snap_closed_form_scales_with_duration_and_span():
    # p(t) = a + (b - a) * closed_form(t / T) by linearity of the system.
    a, b, duration = -2.0, 3.0, 4.0
    segs = bl.min_snap(
        [waypoint(0, a, 0), waypoint(0, b, 0)], segment_times=[duration]
    )
    t = np.linspace(0.0, duration, 101)
    tau = t / duration
    closed = a + (b - a) * (35 * tau**4 - 84 * tau**5 + 70 * tau**6 - 20 * tau**7)
    np.testing.assert_allclose(bl.evaluate_spline(segs, t)[:, 1], closed, atol=1e-6)


def test_min_snap_interpolates_waypoints():
    wps = [
        waypoint(0, 0, 0, 0.1),
        waypoint(1, 0.5, -0.2, 0.4),
        waypoint(2, -0.3, 0.6, -0.3),
        waypoint(2.5, 1.0, 0.0, 0.2),
    ]
    segs = bl.min_snap(wps)
    t = 0.0
    for seg, wp_start, wp_end in zip(segs, wps[:-1], wps[1:]):
        start = seg.evaluate(0.0)
        end = seg.evaluate(seg.duration)
        np.testing.assert_allclose(start[:3], wp_start.position, atol=1e-8)
        np.testing.assert_allclose(end[:3], wp_end.position, atol=1e-8)
        np.testing.assert_allclose(start[3], wp_start.yaw, atol=1e-8)
        np.testing.assert_allclose(end[3], wp_end.yaw, atol=1e-8)
        t += seg.duration


def test_min_snap_joints_continuous_through_jerk():
    wps = [waypoint(0, 0, 0), waypoint(1, 1, 0, 0.5), waypoint(2, 0, 1, -0.5), waypoint(3, 0.2, 0.4)]
    segs = bl.min_snap(wps)
    for left, right in zip(segs[:-1], segs[1:]):
        for order in range(4):
            gap = left.evaluate(left.duration, order) - right.evaluate(0.0, order)
            assert np.abs(gap).max() <= 1e-8


def test_min_snap_endpoint_derivatives_zero():
    segs = bl.min_snap([waypoint(0, 0, 0), waypoint(1, 2, 0.5, 0.3), waypoint(2, 1, 1)])
    for order in (1, 2, 3):
        assert np.abs(segs[0].evaluate(0.0, order)).max() < 1e-8
        assert np.abs(segs[-1].evaluate(segs[-1].duration, order)).max() < 1e-8


def test_min_snap_collinear_waypoints_stay_on_line():
    direction = np.array([1.0, 2.0, -0.5])
    direction /= np.linalg.norm(direction)
    wps = [dyn.FlatWaypoint(s * direction, 0.0) for s in (0.0, 1.0, 2.0)]
    segs = bl.min_snap(wps)
    t = np.linspace(0.0, bl.spline_duration(segs), 301)
    pos = bl.evaluate_spline(segs, t)[:, :3]
    # Transverse boundary data are all zero, so each axis solves the same
    # scalar problem scaled by its direction component.
    transverse = pos - np.outer(pos @ direction, direction)
    assert np.abs(transverse).max() < 1e-8


def test_min_snap_degenerate_times_raise():
    wps = [waypoint(0, 0, 0), waypoint(1, 0, 0)]
    with pytest.raises(bl.SingularSystem):
        bl.min_snap(wps, segment_times=[0.0])
    with pytest.raises(bl.SingularSystem):
        bl.min_snap([waypoint(0, 0, 0), waypoint(1, 0, 0), waypoint(2, 0, 0)],
                    segment_times=[1.0, -1.0])
    with pytest.raises(ValueError):
        bl.min_snap([waypoint(0, 0, 0)])


def test_snap_cost_matches_direct_quadrature():
    segs = bl.min_snap(
        [waypoint(0, 0, 0), waypoint(1, 0.5, 0, 0.3), waypoint(2, 0, 1)]
    )
    exact = bl.snap_cost(segs)
    # Squared snap of a degree-7 polynomial has degree 6, which 8-node
    # Gauss-Legendre integrates exactly.
    nodes, weights = np.polynomial.legendre.leggauss(8)
    quadrature = 0.0
    for seg in segs:
        t_local = 0.5 * seg.duration * (nodes + 1.0)
        snap = seg.evaluate(t_local, derivative=4)
        quadrature += 0.5 * seg.duration * np.sum(weights * np.sum(snap * snap, axis=-1))
    assert exact > 0
    np.testing.assert_allclose(exact, quadrature, rtol=1e-8)


def test_min_snap_beats_naive_interpolant_on_snap_cost():
    # A spline forced through a detour waypoint with pinned joint jerk has
    # no freedom on 2 segments; splitting a straight run into 2 segments
    # does, and the optimum must not exceed the single-segment profile
    # glued at the midpoint with full-rest boundary at the joint.
    wps = [waypoint(0, 0, 0), waypoint(1, 0, 0), waypoint(2, 0, 0)]
    segs = bl.min_snap(wps, segment_times=[1.0, 1.0])
    glued = bl.min_snap([wps[0], wps[1]], segment_times=[1.0]) + bl.min_snap(
        [wps[1], wps[2]], segment_times=[1.0]
    )
    assert bl.snap_cost(segs) <= bl.snap_cost(glued) + 1e-9


def test_default_segment_times_proportional_to_distance():
    positions = np.array([[0.0, 0, 0], [2.0, 0, 0], [2.0, 1.0, 0]])
    times = bl.default_segment_times(positions, speed=2.0)
    np.testing.assert_allclose(times, [1.0, 0.5])


def test_sample_spline_pads_to_minimum_horizon_and_holds_endpoint():
    segs = bl.min_snap([waypoint(0, 0, 0), waypoint(0.2, 0, 0)], segment_times=[0.2])
    traj = bl.sample_spline(segs, dt=0.1)
    assert traj.horizon >= 4
    np.testing.assert_allclose(traj.positions[-1], [0.2, 0, 0], atol=1e-9)
    np.testing.assert_allclose(traj.positions[2:], np.tile([0.2, 0, 0], (traj.horizon - 1, 1)), atol=1e-9)


def test_polysegment_validation():
    with pytest.raises(ValueError):
        bl.PolySegment(np.zeros((4, 7)), 1.0)
    with pytest.raises(ValueError):
        bl.PolySegment(np.zeros((4, 8)), 0.0)


# -- RRT ---------------------------------------------------------------------------


def test_shell_directions_unit_norm_and_spread():
    dirs = bl._shell_directions(26)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-12)
    # Near-uniform coverage: the mean direction of a balanced sample is small.
    assert np.linalg.norm(dirs.mean(axis=0)) < 0.1


def test_sphere_collides_against_wall():
    scene = offset_gap_scene()
    assert bl.sphere_collides(scene, np.array([0.0, -0.5, 0.0]), 0.1, 5.0)
    assert not bl.sphere_collides(scene, np.array([-1.5, 0.0, 0.0]), 0.1, 5.0)
    # A ball whose shell reaches into the wall collides even though the
    # center is outside it.
    assert bl.sphere_collides(scene, np.array([-0.25, -0.5, 0.0]), 0.2, 5.0)


def test_rrt_empty_scene_is_near_straight():
    start = np.array([-1.5, 0.3, -0.2])
    goal = np.array([1.5, -0.4, 0.5])
    straight = np.linalg.norm(goal - start)
    for seed in range(10):
        path = bl.rrt_plan(
            empty_scene(), start, goal, 5.0, 0.2, np.random.default_rng(seed)
        )
        length = np.sum(np.linalg.norm(np.diff(path, axis=0), axis=-1))
        assert length <= 1.05 * straight
        np.testing.assert_array_equal(path[0], start)
        np.testing.assert_array_equal(path[-1], goal)


def test_rrt_routes_through_offset_gap():
    scene = offset_gap_scene()
    start = np.array([-1.5, 0.0, 0.0])
    goal = np.array([1.5, 0.0, 0.0])
    radius = 0.12
    path = bl.rrt_plan(scene, start, goal, 5.0, radius, np.random.default_rng(7))
    # Densely resample the polyline and check ground-truth clearance.
    dense = plan_mod.resample_arclength(path, 400)
    assert np.all(~scene.occupancy(dense))
    assert scene.sdf(dense).min() > 0.5 * radius
    # The free corridor sits around y = 1; the path must use it.
    near_wall = dense[np.abs(dense[:, 0]) < 0.1]
    assert near_wall.size > 0
    assert near_wall[:, 1].min() > 0.7


def test_rrt_narrow_gap_times_out():
    walls = [
        fld.Box(center=[0.0, -1.06, 0.0], half_extents=[0.1, 1.0, 2.0], beta=0.02),
        fld.Box(center=[0.0, 1.06, 0.0], half_extents=[0.1, 1.0, 2.0], beta=0.02),
    ]
    scene = fld.AnalyticScene(walls, bounds_lo=np.full(3, -2.0), bounds_hi=np.full(3, 2.0))
    # Gap full width 0.12 is narrower than the 0.3-diameter sphere.
    with pytest.raises(bl.Timeout):
        bl.rrt_plan(
            scene,
            np.array([-1.5, 0.0, 0.0]),
            np.array([1.5, 0.0, 0.0]),
            5.0,
            0.15,
            np.random.default_rng(3),
            bl.RrtConfig(max_iterations=2000),
        )


def test_rrt_occupied_endpoint_raises():
    scene = offset_gap_scene()
    with pytest.raises(plan_mod.StartOrGoalOccupied):
        bl.rrt_plan(
            scene,
            np.array([0.0, -0.5, 0.0]),
            np.array([1.5, 0.0, 0.0]),
            5.0,
            0.1,
            np.random.default_rng(0),
        )


def test_rrt_deterministic_per_seed():
    scene = offset_gap_scene()
    start = np.array([-1.5, 0.0, 0.0])
    goal = np.array([1.5, 0.0, 0.0])
    first = bl.rrt_plan(scene, start, goal, 5.0, 0.12, np.random.default_rng(11))
    second = bl.rrt_plan(scene, start, goal, 5.0, 0.12, np.random.default_rng(11))
    np.testing.assert_array_equal(first, second)


def test_grow_rrt_tree_connected_and_acyclic():
    scene = offset_gap_scene()
    tree, goal_index = bl.grow_rrt(
        scene,
        np.array([-1.5, 0.0, 0.0]),
        np.array([1.5, 0.0, 0.0]),
        5.0,
        0.12,
        np.random.default_rng(5),
    )
    assert tree.parents[0] == -1
    assert np.all(tree.parents[1:] >= 0)
    # Parent indices strictly precede their children: acyclic and connected.
    assert np.all(tree.parents[1:] < np.arange(1, len(tree.nodes)))
    assert goal_index == len(tree.nodes) - 1
    # Every edge is collision-free under the same spherical test.
    config = bl.RrtConfig()
    for child in range(1, len(tree.nodes)):
        parent = tree.parents[child]
        assert bl._edge_free(
            scene, tree.nodes[parent], tree.nodes[child], 0.12, 5.0, config
        )


def test_rrt_config_validation():
    with pytest.raises(ValueError):
        bl.RrtConfig(step_size=0.0)
    with pytest.raises(ValueError):
        bl.RrtConfig(goal_bias=1.5)
    with pytest.raises(ValueError):
        bl.RrtConfig(max_iterations=0)


def test_track_path_constant_speed_and_yaw():
    path = np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1.0, 0]])
    traj = bl.track_path(path, dt=0.1, speed=1.0, yaw=0.4)
    steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=-1)
    np.testing.assert_allclose(steps, steps[0], atol=1e-9)
    np.testing.assert_allclose(traj.yaws, 0.4)
    np.testing.assert_allclose(traj.positions[0], path[0], atol=1e-12)
    np.testing.assert_allclose(traj.positions[-1], path[-1], atol=1e-12)
    # Arc length 2.0 at speed 1.0 and dt 0.1 gives horizon 20.
    assert traj.horizon == 20


# -- comparison harness --------------------------------------------------------------


def small_planner_config(**overrides):
    # A generous horizon keeps rest-start accelerations well below the
    # free-fall tilt where the flat chain loses its rotation chart.
    defaults = dict(horizon=20, dt=0.1, iterations=60, grid_resolution=8, seed=0)
    defaults.update(overrides)
    return plan_mod.PlannerConfig(**defaults)


def test_compare_planners_empty_scene_no_failures():
    scene = empty_scene()
    robot = dyn.RobotModel()
    body = dyn.make_body_model(robot)
    scenarios = [
        bl.Scenario("a", [-1.5, 0.0, 0.0], [1.5, 0.0, 0.0]),
        bl.Scenario("b", [-1.0, -1.0, 0.5], [1.0, 1.0, -0.5], seed=1),
    ]
    config = bl.ComparisonConfig(planner=small_planner_config(), collision_radius=0.2)
    report = bl.compare_planners(scenarios, scene, body, config, robot)
    assert len(report.rows) == len(scenarios) * 3
    for row in report.rows:
        assert row["error"] == ""
        assert row["failure"] is False
        assert np.isfinite(row["collision_cost"])
        assert np.isfinite(row["control_cost"])
    planners = {row["planner"] for row in report.rows}
    assert planners == set(bl.PLANNER_NAMES)


def test_compare_planners_records_errors_without_aborting():
    scene = offset_gap_scene()
    robot = dyn.RobotModel()
    body = dyn.make_body_model(robot)
    # Start inside the wall: every planner fails on scenario "bad" while
    # scenario "good" still completes.
    scenarios = [
        bl.Scenario("bad", [0.0, -0.5, 0.0], [1.5, 0.0, 0.0]),
        bl.Scenario("good", [-1.5, 1.0, 0.0], [1.5, 1.0, 0.0], seed=2),
    ]
    config = bl.ComparisonConfig(planner=small_planner_config(), collision_radius=0.1)
    report = bl.compare_planners(scenarios, scene, body, config, robot)
    assert len(report.rows) == 6
    for planner in bl.PLANNER_NAMES:
        assert report.row("bad", planner)["error"] != ""
        assert report.row("bad", planner)["failure"] is True
        assert report.row("good", planner)["error"] == ""


def test_comparison_report_files_round_trip(tmp_path):
    scene = empty_scene()
    robot = dyn.RobotModel()
    body = dyn.make_body_model(robot)
    scenarios = [bl.Scenario("a", [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0])]
    config = bl.ComparisonConfig(planner=small_planner_config(iterations=5))
    report = bl.compare_planners(scenarios, scene, body, config, robot)

    json_path = tmp_path / "report.json"
    csv_path = tmp_path / "report.csv"
    bl.save_report(json_path, report)
    bl.save_report_csv(csv_path, report)

    loaded = bl.load_report(json_path)
    assert loaded["format_version"] == 1
    assert len(loaded["rows"]) == 3
    assert set(loaded["trajectories"]["a"]) == set(bl.PLANNER_NAMES)

    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "scenario,planner,collision_cost,control_cost,failure"
    assert len(lines) == 4


def test_resolve_threshold_uses_half_peak_density():
    scene = offset_gap_scene()
    config = bl.ComparisonConfig()
    assert bl.resolve_threshold(scene, config) == pytest.approx(5.0)
    override = bl.ComparisonConfig(rrt_threshold=2.5)
    assert bl.resolve_threshold(scene, override) == pytest.approx(2.5)
    assert bl.resolve_threshold(empty_scene(), config) == pytest.approx(5.0)


def test_ground_truth_failure_detects_wall_crossing():
    scene = offset_gap_scene()
    robot = dyn.RobotModel()
    body = dyn.make_body_model(robot)
    through = dyn.FlatTrajectory(
        np.linspace([-1.5, 0.0, 0.0], [1.5, 0.0, 0.0], 11), np.zeros(11), 0.1
    )
    clear = dyn.FlatTrajectory(
        np.linspace([-1.5, 1.0, 0.0], [1.5, 1.0, 0.0], 11), np.zeros(11), 0.1
    )
    assert bl.ground_truth_failure(through, scene, body, robot) is True
    assert bl.ground_truth_failure(clear, scene, body, robot) is False
