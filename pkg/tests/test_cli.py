import dataclasses
import json

import numpy as np
import pytest

import fieldnav.cli as cli
import fieldnav.dynamics as dyn
import fieldnav.estimator as est
import fieldnav.field as fld
import fieldnav.planner as plan_mod
import fieldnav.render as render_mod
import fieldnav.sim as sim


@pytest.fixture
def workspace(tmp_path):
    """Scene, robot, and run-config files wired together on disk."""
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
        camera=render_mod.Camera(width=16, height=16, fx=16.0, fy=16.0),
        max_steps=25,
        goal_tolerance=0.1,
        master_seed=3,
    )
    config_path = tmp_path / "run.json"
    sim.save_run_config(config_path, config)
    return tmp_path, config_path, scene_path


def test_navigate_writes_runlog_and_is_deterministic(workspace):
    tmp_path, config_path, _ = workspace
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    for out in (out_a, out_b):
        code = cli.main(["navigate", "--config", str(config_path), "--out-dir", str(out)])
        assert code == 0
    log_a = (out_a / "runlog.jsonl").read_bytes()
    log_b = (out_b / "runlog.jsonl").read_bytes()
    assert log_a == log_b
    log = sim.load_runlog(out_a / "runlog.jsonl")
    assert log.status in ("reached", "timeout")


def test_navigate_seed_override_changes_noise(workspace):
    tmp_path, config_path, _ = workspace
    out_a = tmp_path / "s3"
    out_b = tmp_path / "s4"
    assert cli.main(["navigate", "--config", str(config_path), "--out-dir", str(out_a)]) == 0
    assert cli.main(["navigate", "--config", str(config_path), "--seed", "4",
                     "--out-dir", str(out_b)]) == 0
    assert (out_a / "runlog.jsonl").read_bytes() != (out_b / "runlog.jsonl").read_bytes()


def test_plan_writes_json_and_csv(workspace):
    tmp_path, config_path, _ = workspace
    out = tmp_path / "plan_out"
    assert cli.main(["plan", "--config", str(config_path), "--out-dir", str(out)]) == 0
    payload = plan_mod.load_plan(out / "plan.json")
    waypoints = np.asarray(payload["waypoints"])
    assert waypoints.shape == (13, 3)
    np.testing.assert_allclose(waypoints[0], [-1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(waypoints[-1], [0.6, 0.0, 0.0], atol=1e-12)
    lines = (out / "plan.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 13


def test_estimate_replays_navigate_log(workspace):
    tmp_path, config_path, _ = workspace
    out = tmp_path / "nav"
    assert cli.main(["navigate", "--config", str(config_path), "--out-dir", str(out)]) == 0
    replay_out = tmp_path / "replay"
    code = cli.main(["estimate", "--config", str(config_path),
                     "--log", str(out / "runlog.jsonl"), "--out-dir", str(replay_out)])
    assert code == 0
    replay = sim.load_runlog(replay_out / "replay.jsonl")
    source = sim.load_runlog(out / "runlog.jsonl")
    assert replay.status == "replayed"
    assert len(replay.records) == len(source.records)


def test_estimate_without_log_is_usage_error(workspace, capsys):
    _, config_path, _ = workspace
    assert cli.main(["estimate", "--config", str(config_path)]) == 1
    assert "usage error" in capsys.readouterr().err


def test_compare_writes_reports(workspace):
    tmp_path, config_path, scene_path = workspace
    compare_cfg = {
        "format_version": 1,
        "scene_path": "scene.json",
        "planner": {"horizon": 20, "dt": 0.1, "iterations": 60,
                    "grid_resolution": 8, "seed": 0},
        "rrt": {"max_iterations": 2000},
        "collision_radius": 0.3,
        "scenarios": [
            {"name": "a", "start": [-1.0, 0.0, 0.0], "goal": [1.0, 0.0, 0.0], "seed": 0},
            {"name": "b", "start": [0.0, -1.0, 0.0], "goal": [0.0, 1.0, 0.0], "seed": 1},
        ],
    }
    cfg_path = tmp_path / "compare.json"
    cfg_path.write_text(json.dumps(compare_cfg))
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
    payload = baselines_load(out / "report.json")
    assert len(payload["rows"]) == 6
    csv_lines = (out / "report.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 1 + 6


def baselines_load(path):
    import fieldnav.baselines as baselines
    return baselines.load_report(path)


def test_render_identity_pose_is_all_background(workspace):
    tmp_path, _, scene_path = workspace
    out = tmp_path / "img"
    code = cli.main(["render", "--scene", str(scene_path), "--pose", "identity",
                     "--width", "12", "--height", "10", "--focal", "12",
                     "--out-dir", str(out)])
    assert code == 0
    pixels = render_mod.load_ppm(out / "render.ppm")
    assert pixels.shape == (10, 12, 3)
    # empty scene: every ray keeps full transmittance and returns the background
    np.testing.assert_allclose(pixels, 0.5, atol=1 / 255)
    sidecar = json.loads((out / "render.ppm.json").read_text())
    assert sidecar["width"] == 12 and sidecar["height"] == 10


def test_render_offset_pose_and_bad_pose(workspace):
    tmp_path, _, scene_path = workspace
    out = tmp_path / "img2"
    assert cli.main(["render", "--scene", str(scene_path), "--pose", "0,0,2,0.3",
                     "--width", "8", "--height", "8", "--focal", "8",
                     "--out-dir", str(out)]) == 0
    assert cli.main(["render", "--scene", str(scene_path), "--pose", "not,a,pose"]) == 1
    assert cli.main(["render", "--scene", str(scene_path), "--pose", "1,2"]) == 1


def test_plot_runlog_and_report(workspace):
    tmp_path, config_path, _ = workspace
    out = tmp_path / "nav2"
    assert cli.main(["navigate", "--config", str(config_path), "--out-dir", str(out)]) == 0
    assert cli.main(["plot", str(out / "runlog.jsonl"), "--out-dir", str(out)]) == 0
    assert (out / "runlog.svg").read_text().find("<svg") >= 0


def test_usage_and_runtime_exit_codes(workspace, tmp_path):
    _, config_path, _ = workspace
    assert cli.main([]) == 1
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["navigate"]) == 1  # missing --config
    assert cli.main(["--help"]) == 0
    missing = str(tmp_path / "nope.json")
    assert cli.main(["navigate", "--config", missing]) == 2


def test_navigate_rejects_plan_only_mode(workspace):
    tmp_path, config_path, _ = workspace
    config = sim.load_run_config(config_path)
    config = dataclasses.replace(config, mode="plan-only")
    plan_cfg = tmp_path / "plan_only.json"
    sim.save_run_config(plan_cfg, config)
    assert cli.main(["navigate", "--config", str(plan_cfg)]) == 1
