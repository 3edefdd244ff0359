import numpy as np
import pytest

from mclivo.errors import OutOfRange, ScenarioError
from mclivo.geom import Pose, project, so3_log
from mclivo.imu import NavState, propagate, undistort_scan
from mclivo.sim import (ImuSpec, LidarSpec, RigSpec, Simulation,
                        Trajectory, TrajectorySpec, World, WorldSpec,
                        build_calibs, build_cameras, gt_pose, load_scenario,
                        render_camera, sample_imu, scan_lidar, scenario_from_dict)
from mclivo.voxmap import fit_plane, voxel_keys


def circle(duration=None, **kw):
    r, v = 5.0, 1.0
    period = 2 * np.pi * r / v
    return TrajectorySpec(family="circle", duration=duration or period, speed=v, **kw)


def test_circle_start_and_period():
    spec = circle()
    s0 = gt_pose(spec, 0.0)
    np.testing.assert_allclose(s0.pose.t, [5.0, 0.0, 1.5], atol=1e-12)
    np.testing.assert_allclose(s0.velocity, [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(s0.pose.R[:, 0], [0, 1, 0], atol=1e-12)
    s1 = gt_pose(spec, spec.duration)
    np.testing.assert_allclose(s1.pose.t, s0.pose.t, atol=1e-12)
    np.testing.assert_allclose(s1.pose.R, s0.pose.R, atol=1e-12)
    with pytest.raises(OutOfRange):
        gt_pose(spec, spec.duration + 1.0)


@pytest.mark.parametrize("family", ["circle", "figure_eight", "corridor"])
def test_derivatives_match_finite_differences(family):
    spec = TrajectorySpec(family=family, duration=40.0, z_amp=0.1, roll_amp=0.05,
                          pitch_amp=0.04)
    tr = Trajectory(spec)
    h = 1e-5
    for t in np.linspace(1.0, 39.0, 17):
        pos_m, vel_m, _, R_m, _, _ = tr.evaluate(t - h)
        pos_p, vel_p, _, R_p, _, _ = tr.evaluate(t + h)
        s = tr.gt_pose(t)
        np.testing.assert_allclose((pos_p - pos_m)[0] / (2 * h), s.velocity, atol=1e-6)
        np.testing.assert_allclose((vel_p - vel_m)[0] / (2 * h), s.acceleration, atol=1e-5)
        w = so3_log(R_m[0].T @ R_p[0]) / (2 * h)
        np.testing.assert_allclose(w, s.omega, atol=1e-6)


def test_static_imu_is_gravity_plus_bias():
    spec = TrajectorySpec(family="circle", duration=2.0, speed=0.0)
    imu = sample_imu(Trajectory(spec), ImuSpec(gyro_bias=(0.01, 0, 0), accel_bias=(0, 0, 0)))
    for s in imu:
        np.testing.assert_allclose(s.gyro, [0.01, 0, 0], atol=1e-15)
        np.testing.assert_allclose(s.accel, [0, 0, 9.81], atol=1e-12)


def test_imu_deterministic_and_rate_checked():
    tr = Trajectory(circle())
    a = sample_imu(tr, ImuSpec(), np.random.default_rng(5))
    b = sample_imu(tr, ImuSpec(), np.random.default_rng(5))
    assert all(np.array_equal(x.gyro, y.gyro) and np.array_equal(x.accel, y.accel)
               for x, y in zip(a, b))
    with pytest.raises(ScenarioError):
        sample_imu(tr, ImuSpec(rate=50))


def test_noiseless_circle_propagation_round_trip():
    spec = circle(duration=10.0)
    tr = Trajectory(spec)
    ispec = ImuSpec(rate=400.0)
    imu = sample_imu(tr, ispec)
    g0 = tr.gt_pose(0.0)
    x = NavState(R=g0.pose.R, p=g0.pose.t, v=g0.velocity, bg=np.array(ispec.gyro_bias),
                 ba=np.array(ispec.accel_bias))
    _, _, traj = propagate(x, np.zeros((18, 18)), imu, with_trajectory=True)
    est = np.array([p for _, _, p in traj])
    gt = tr.evaluate(np.array([t for t, _, _ in traj]))[0]
    assert np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))) < 1e-3


def small_rig(**kw):
    return RigSpec(cameras=2, width=96, height=72, **kw)


def test_uniform_plane_normalizes_flat():
    world = World(WorldSpec(kind="box", outer=4.0, uniform=0.4), seed=0)
    rig = small_rig(vignetting=(0.3, 0.05, 0.0))
    cams = build_cameras(rig)
    cals = build_calibs(rig, cams)
    T_wc = Pose(np.eye(3), [0, 0, 1.5]) @ cams[0].T_cb.inverse()
    raw = render_camera(world, T_wc, cams[0], cals[0])
    np.testing.assert_allclose(cals[0].normalize_image(raw), 0.4, atol=1e-12)


def test_vignetting_darkens_raw_corners():
    world = World(WorldSpec(kind="box", outer=4.0, uniform=0.4), seed=0)
    rig = small_rig()
    cams = build_cameras(rig)
    cal = build_calibs(rig, cams)[0]
    raw = render_camera(world, Pose(np.eye(3), [0, 0, 1.5]) @ cams[0].T_cb.inverse(),
                        cams[0], cal)
    center = raw[35:37, 47:49].mean()
    for corner in (raw[0, 0], raw[0, -1], raw[-1, 0], raw[-1, -1]):
        assert corner < center


def test_cross_camera_consistency():
    world = World(WorldSpec(kind="box", outer=4.0), seed=1)
    rig = small_rig(alphas=(1.0, 2.0))
    cams = build_cameras(rig)
    cals = build_calibs(rig, cams)
    T_wc = Pose(np.eye(3), [0, 0, 1.5]) @ cams[0].T_cb.inverse()
    a = cals[0].normalize_image(render_camera(world, T_wc, cams[0], cals[0]))
    b = cals[1].normalize_image(render_camera(world, T_wc, cams[0], cals[1]))
    assert np.abs(a - b).max() < 1 / 255


def test_render_matches_projection():
    world = World(WorldSpec(kind="box", outer=4.0), seed=2)
    rig = small_rig()
    cams = build_cameras(rig)
    cals = build_calibs(rig, cams)
    T_wc = Pose(np.eye(3), [0.3, -0.2, 1.4]) @ cams[1].T_cb.inverse()
    _, depth = render_camera(world, T_wc, cams[1], cals[1], return_depth=True)
    rng = np.random.default_rng(0)
    for _ in range(50):
        u, v = rng.integers(0, 96), rng.integers(0, 72)
        ray = np.array([(u - cams[1].cx) / cams[1].fx, (v - cams[1].cy) / cams[1].fy, 1.0])
        X_w = T_wc.apply(ray * depth[v, u])
        uv = project(cams[1], T_wc.inverse().apply(X_w))
        assert np.abs(uv - [u, v]).max() < 0.5


def test_stationary_scan_of_plane_recovers_normal():
    world = World(WorldSpec(kind="box", outer=1.5), seed=3)
    tr = Trajectory(TrajectorySpec(family="circle", duration=1.0, speed=0.0))
    pts = scan_lidar(world, tr, 0.0, LidarSpec(), np.random.default_rng(0))
    pw = tr.gt_pose(0.0).pose.apply(pts.xyz)
    wall = pw[(np.abs(pw[:, 0] - 1.5) < 0.05) & (np.abs(pw[:, 1]) < 1.4)]
    keys = voxel_keys(wall, 0.5)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    checked = 0
    for key in uniq[counts >= 50]:
        pl = fit_plane(wall[np.all(keys == key, axis=1)])
        assert np.degrees(np.arccos(abs(pl.normal[0]))) < 1.0
        checked += 1
    assert checked >= 4


def test_noiseless_scan_lies_on_planes():
    world = World(WorldSpec(kind="ring"), seed=4)
    tr = Trajectory(TrajectorySpec(duration=10.0))
    pts = scan_lidar(world, tr, 1.0, LidarSpec(range_noise=0.0))
    pos, _, _, R, _, _ = tr.evaluate(pts.t)
    pw = np.einsum("nij,nj->ni", R, pts.xyz) + pos
    dist = np.min(np.abs(pw @ world._n.T - np.sum(world._n * world._o, axis=1)), axis=1)
    assert dist.max() < 1e-9


def test_moving_scan_undistorts_onto_planes():
    world = World(WorldSpec(kind="ring"), seed=5)
    tr = Trajectory(TrajectorySpec(duration=20.0, speed=2.0))
    spec = LidarSpec()
    t0 = 7.3
    pts = scan_lidar(world, tr, t0, spec, np.random.default_rng(1))
    ts = np.linspace(t0, t0 + spec.scan_period, 21)
    pos, _, _, R, _, _ = tr.evaluate(ts)
    traj = [(t, R[k], pos[k]) for k, t in enumerate(ts)]
    end = undistort_scan(pts, traj, t_end=t0 + spec.scan_period)
    pw = Pose(R[-1], pos[-1]).apply(end)
    dist = np.min(np.abs(pw @ world._n.T - np.sum(world._n * world._o, axis=1)), axis=1)
    assert np.mean(dist < 2 * spec.range_noise) > 0.95
    # without deskewing the error is visibly larger
    raw = Pose(R[-1], pos[-1]).apply(pts.xyz)
    dist_raw = np.min(np.abs(raw @ world._n.T - np.sum(world._n * world._o, axis=1)), axis=1)
    assert np.mean(dist_raw) > 2 * np.mean(dist)


def test_simulation_deterministic():
    sc = scenario_from_dict({"trajectory": {"duration": 2.0}, "rig": {"cameras": 2}})
    a, b = Simulation(sc), Simulation(sc)
    np.testing.assert_array_equal(a.scan(3).xyz, b.scan(3).xyz)
    np.testing.assert_array_equal(a.frame(4, 1).image, b.frame(4, 1).image)
    assert all(np.array_equal(x.accel, y.accel) for x, y in zip(a.imu, b.imu))
    pkt = a.packet(5)
    assert len(pkt.frames) == 2 and pkt.t == pytest.approx(0.5)


def test_scenario_loading(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("name: t\nseed: 3\nrig: {cameras: 2, alphas: [1.0, 2.0]}\n")
    sc = load_scenario(p)
    assert sc.seed == 3 and sc.rig.cameras == 2 and sc.rig.alphas == (1.0, 2.0)
    assert load_scenario("corridor").trajectory.family == "corridor"
    with pytest.raises(ScenarioError):
        scenario_from_dict({"rig": {"nope": 1}})
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.yaml")
