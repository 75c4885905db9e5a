import math

import numpy as np
import pytest

from owslam.geometry import Pose, exp_so3
from owslam.render import Frame, Intrinsics, pixel_grid, pixel_rays, project, quantize_depth
from owslam.scenegen import (
    Box,
    CheckerEnv,
    Dataset,
    DepthNoise,
    Solid,
    SyntheticScene,
    TrajectorySpec,
    build_scenario,
    generate,
    look_at,
    make_trajectory,
    oracle_render,
    read_dataset,
    read_trajectory,
    write_dataset,
    write_trajectory,
)

INTR = Intrinsics(20.0, 20.0, 8.0, 6.0, 16, 12)


def _scalar_slab(o, d, lo, hi):
    # textbook slab method, one ray at a time
    t_near, t_far = -math.inf, math.inf
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return math.inf, -math.inf
            continue
        t1, t2 = (lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]
        if t1 > t2:
            t1, t2 = t2, t1
        t_near, t_far = max(t_near, t1), min(t_far, t2)
    return t_near, t_far


def test_wall_center_depth():
    scene = SyntheticScene([], Box([-5, -5, -5], [5, 5, 2.0]), env_map=CheckerEnv())
    pose = Pose(np.eye(3), np.zeros(3))  # looking along +z at the z = 2 wall
    f = oracle_render(scene, pose, Intrinsics(10, 10, 2.5, 2.5, 5, 5))
    assert f.depth[2, 2] == 2.0


def test_escape_gives_env_colour():
    env = CheckerEnv()
    scene = SyntheticScene([Box([-1, -1, 5], [1, 1, 6], Solid((1, 0, 0)))], env_map=env)
    pose = Pose(look_at([0, 0, 0], [10, 0, 0]), np.zeros(3))
    f = oracle_render(scene, pose, INTR)
    assert np.all(f.depth == 0)
    _, d = pixel_rays(INTR, pixel_grid(INTR), pose)
    np.testing.assert_allclose(f.rgb.reshape(-1, 3), env(d), atol=1e-15)


def test_depth_matches_slab_oracle():
    sc = build_scenario("room-orbit", 3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pos = rng.uniform([-1.5, -1.5, -0.2], [1.5, 1.5, 1.2])
        pose = Pose(exp_so3(rng.normal(size=3)), pos)
        f = oracle_render(sc.scene, pose, INTR)
        o, d = pixel_rays(INTR, pixel_grid(INTR), pose)
        for k in range(len(d)):
            best = math.inf
            for b in sc.scene.boxes:
                tn, tf = _scalar_slab(o[k], d[k], b.lo, b.hi)
                if tn <= tf and tn > 0:
                    best = min(best, tn)
            _, tf = _scalar_slab(o[k], d[k], sc.scene.room.lo, sc.scene.room.hi)
            best = min(best, tf)
            assert f.depth.ravel()[k] == pytest.approx(best, abs=1e-12)


def test_depth_noise_statistics():
    scene = SyntheticScene([], Box([-5, -5, -5], [5, 5, 2.0]))
    intr = Intrinsics(200, 200, 100, 100, 200, 200)
    f0 = oracle_render(scene, Pose.identity(), intr)
    f = oracle_render(scene, Pose.identity(), intr, depth_noise=DepthNoise(), rng=np.random.default_rng(1))
    z = (f.depth - f0.depth) / DepthNoise().sigma(f0.depth)
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02


def test_scene_validation():
    with pytest.raises(ValueError):
        SyntheticScene([Box([0, 0, 0], [3, 1, 1])], Box([-2, -2, -2], [2, 2, 2]))
    with pytest.raises(ValueError):
        Box([0, 0, 0], [0, 1, 1])


def test_trajectories():
    spec = TrajectorySpec("static", 1.0, 1.0, 1.0, 10.0, look_at=(0, 0, 0))
    traj = make_trajectory(spec)
    assert len(traj) == 11
    assert all(np.array_equal(p.C, traj[0][1].C) and np.array_equal(p.r, traj[0][1].r) for _, p in traj)
    spec = TrajectorySpec("orbit", 2.0, 0.7, 5.0, 20.0, look_at=(0, 0, 0.3), center=(0.1, -0.2, 0.5))
    traj = make_trajectory(spec)
    for _, p in traj:
        assert np.linalg.norm(p.r - np.array([0.1, -0.2, 0.5])) == pytest.approx(2.0, abs=1e-12)
    for kind in ("orbit", "lissajous"):
        spec = TrajectorySpec(kind, 1.0, 0.5, 4.0, 10.0, look_at=(0.2, 0.1, -0.5))
        for _, p in make_trajectory(spec):
            uv, z = project(INTR, p, np.array([[0.2, 0.1, -0.5]]))
            assert z[0] > 0
            assert np.max(np.abs(uv[0] - [INTR.cx, INTR.cy])) <= 0.5
            # camera y axis points down (negative world z component)
            assert p.C[2, 1] <= 0
    with pytest.raises(ValueError):
        look_at([0, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError):
        TrajectorySpec("spiral")


def test_trajectory_timestamps_on_velocity_clock():
    sc = build_scenario("room-orbit", 0, n_frames=21)
    ds = generate(sc, seed=0)
    assert len(ds.frames) == 21
    assert len(ds.measurements) == 100
    meas_t = {m.t for m in ds.measurements} | {ds.measurements[-1].t_end}
    assert all(f.t in meas_t for f in ds.frames)
    assert ds.measurements[-1].t_end == pytest.approx(ds.frames[-1].t, abs=1e-12)


def test_dataset_round_trip(tmp_path):
    sc = build_scenario("room-orbit", 4, n_frames=6)
    ds = generate(sc, seed=4)
    write_dataset(tmp_path / "ds", ds.frames, ds.groundtruth, ds.measurements, ds.meta)
    back = read_dataset(tmp_path / "ds")
    assert len(back.frames) == 6 and back.imu_enabled
    assert [f.t for f in back.frames] == [f.t for f in ds.frames]
    for (t0, p0), (t1, p1) in zip(ds.groundtruth, back.groundtruth):
        assert t0 == t1
        np.testing.assert_allclose(p1.C, p0.C, atol=1e-7)
        np.testing.assert_allclose(p1.r, p0.r, atol=1e-7)
    for a, b in zip(ds.frames, back.frames):
        assert np.max(np.abs(a.depth - b.depth)) <= 0.0001 + 1e-12
        assert np.max(np.abs(a.rgb - b.rgb)) <= 0.5 / 255 + 1e-12
    for a, b in zip(ds.measurements, back.measurements):
        np.testing.assert_array_equal(a.v, b.v)
        assert a.t == b.t and a.T == b.T
        np.testing.assert_allclose(b.cov_v, sc.noise.sigma_v)
    assert back.fg_bounds[0].tolist() == sc.fg_bounds[0].tolist()
    assert back.meta["scenario"] == "room-orbit"


def test_depth_quantisation_example(tmp_path):
    intr = Intrinsics(1.0, 1.0, 0.5, 0.5, 1, 1)
    f = Frame(0.0, np.zeros((1, 1, 3)), np.array([[1.2345]]), intr)
    write_dataset(tmp_path, [f], [(0.0, Pose.identity())], [], {})
    raw = (tmp_path / "depth" / "000000.pgm").read_bytes()
    assert int.from_bytes(raw[-2:], "big") == 6173 == int(quantize_depth(1.2345))
    back = read_dataset(tmp_path)
    assert back.frames[0].depth[0, 0] == pytest.approx(1.2346, abs=1e-12)
    assert not back.imu_enabled


def test_dataset_errors_name_file_and_line(tmp_path):
    sc = build_scenario("room-orbit", 5, n_frames=3)
    ds = generate(sc, seed=5)
    root = tmp_path / "ds"
    write_dataset(root, ds.frames, ds.groundtruth, ds.measurements, ds.meta)
    gt = (root / "groundtruth.txt").read_text().splitlines()
    gt[2] = "0.05 1 2 3"
    (root / "groundtruth.txt").write_text("\n".join(gt) + "\n")
    with pytest.raises(ValueError, match=r"groundtruth.txt:3"):
        read_dataset(root)
    write_dataset(root, ds.frames, ds.groundtruth, ds.measurements, ds.meta)
    (root / "depth" / "000001.pgm").unlink()
    with pytest.raises(ValueError, match=r"rgb.txt:3"):
        read_dataset(root)
    (root / "rgb.txt").unlink()
    with pytest.raises(FileNotFoundError, match="rgb.txt"):
        read_dataset(root)


def test_trajectory_file_precision(tmp_path):
    traj = make_trajectory(TrajectorySpec("orbit", 1.0, 0.3, 1.0, 5.0))
    write_trajectory(tmp_path / "t.txt", traj)
    line = (tmp_path / "t.txt").read_text().splitlines()[2]
    assert all(len(x.replace("-", "").replace(".", "").lstrip("0")) <= 9 for x in line.split()[1:]
               if "e" not in x)
    back = read_trajectory(tmp_path / "t.txt")
    for (_, a), (_, b) in zip(traj, back):
        np.testing.assert_allclose(b.r, a.r, atol=1e-8)


def test_scenarios():
    a = build_scenario("room-orbit", 7)
    b = build_scenario("bg-truncated", 7)
    assert np.all(a.fg_bounds[0] <= a.scene.room.lo) and np.all(a.fg_bounds[1] >= a.scene.room.hi)
    # the truncated map box is smaller than the room on every axis
    assert np.all(b.fg_bounds[1] - b.fg_bounds[0] < b.scene.room.hi - b.scene.room.lo)
    assert np.all(b.fg_bounds[1][:2] < b.scene.room.hi[:2])
    with pytest.raises(ValueError):
        build_scenario("moon-base")
    d1, d2 = generate(build_scenario("room-orbit", 7, n_frames=3), 7), \
        generate(build_scenario("room-orbit", 7, n_frames=3), 7)
    for f1, f2 in zip(d1.frames, d2.frames):
        assert np.array_equal(f1.depth, f2.depth) and np.array_equal(f1.rgb, f2.rgb)
