import math

import numpy as np
import pytest

from docdepth import io as dio
from docdepth import scenes, synth
from docdepth.core import Label


def _script(planes=(), boxes=(), movers=(), beams=(-30.0,), h_res=10.0, n=3, camera=None, noise=0.0, seed=0):
    d = {"seed": seed, "frames": {"count": n, "rate": 10.0, "t0": 0.0},
         "trajectory": [[0.0, 0, 0, 2.0, 0.0], [(n - 1) / 10.0 + 1e-6, 1.0, 0, 2.0, 0.0]],
         "sensor": {"beams": list(beams), "h_res_deg": h_res, "max_range": 200.0, "min_range": 0.1,
                    "noise_sigma": noise},
         "planes": list(planes), "boxes": list(boxes), "movers": list(movers)}
    if camera:
        d["camera"] = camera
    return synth.script_from_dict(d)


GROUND = scenes._ground()


def test_beam_hits_ground_at_expected_range():
    sim = synth.Simulator(_script([GROUND]))
    cloud, ids = sim.raycast_frame(0.0, sim.sensor_pose(0.0))
    assert len(cloud) == 36
    assert np.allclose(np.linalg.norm(cloud.points, axis=1), 2.0 / math.sin(math.radians(30.0)))
    assert np.all(cloud.labels == Label.GROUND)


def test_ray_missing_everything_gives_no_point():
    sim = synth.Simulator(_script([GROUND], beams=(10.0,)))
    cloud, ids = sim.raycast_frame(0.0, sim.sensor_pose(0.0))
    assert len(cloud) == 0 and len(ids) == 0


def _cluttered(seed):
    rng = np.random.default_rng(seed)
    boxes = [scenes._box(rng.uniform([-20, -20, 0], [20, 20, 3]), rng.uniform(0.2, 3, 3), rng.uniform(0, 180))
             for _ in range(8)]
    planes = [GROUND, {"center": [25.0, 0, 5], "normal": [-1, 0, 0], "u_axis": [0, 1, 0],
                       "half_extents": [10.0, 5.0]}]
    movers = [{"half_extents": [2, 1, 0.8], "schedule": [[0, -5, 0, 0.8, 0], [1, 5, 3, 0.8, 45]]}]
    return _script(planes, boxes, movers, beams=np.linspace(-25, 15, 24), h_res=1.0)


@pytest.mark.parametrize("seed", range(5))
def test_fast_cast_matches_brute_force(seed):
    sim = synth.Simulator(_cluttered(seed))
    dirs = sim.script.sensor.directions()
    for t in (0.0, 0.1, 0.2):
        origin = sim.sensor_pose(t).u
        a, ia = sim.cast(origin, dirs, t)
        b, ib = sim.cast_reference(origin, dirs, t)
        assert np.array_equal(np.isfinite(a), np.isfinite(b))
        f = np.isfinite(a)
        assert np.abs(a[f] - b[f]).max() < 1e-9
        assert np.array_equal(ia, ib)


def test_box_in_front_of_wall():
    wall = {"center": [20.0, 0, 5], "normal": [-1, 0, 0], "u_axis": [0, 1, 0], "half_extents": [20.0, 10.0]}
    box = scenes._box((10.0, 0.0, 2.0), (1.0, 1.0, 1.0))
    sim = synth.Simulator(_script([wall], [box], beams=(0.0,), h_res=0.5))
    cloud, ids = sim.raycast_frame(0.0, sim.sensor_pose(0.0))
    ahead = np.abs(np.degrees(np.arctan2(cloud.points[:, 1], cloud.points[:, 0]))) < 5.0
    assert np.allclose(cloud.points[ahead, 0], 9.0) and np.all(ids[ahead] == 1)


@pytest.mark.parametrize("seed", range(3))
def test_noiseless_points_lie_on_surfaces(seed):
    script = _cluttered(seed)
    sim = synth.Simulator(script)
    for i in range(3):
        cloud, ids, pose = sim.frame(i)
        world = pose.apply(cloud.points)
        t = float(script.frame_times[i])
        prims = sim.primitives_at(t)
        for k in np.unique(ids):
            p = world[ids == k]
            prim = prims[k]
            if isinstance(prim, synth.PlanePrim):
                res = np.abs((p - prim.center) @ prim.normal)
            else:
                local = np.abs((p - prim.center) @ prim.rotation) - prim.half_extents
                res = np.abs(local.max(axis=1))      # on the boundary of the box
            assert res.max() < 1e-9


def test_mover_points_inside_posed_volume():
    script = _cluttered(1)
    sim = synth.Simulator(script)
    for i in range(3):
        cloud, ids, pose = sim.frame(i)
        m = ids >= sim.n_static
        box = script.movers[0].box_at(float(script.frame_times[i]))
        assert m.any() and np.all(box.contains(pose.apply(cloud.points[m])))
        assert np.all(cloud.labels[m] == Label.DYNAMIC)


def test_noise_is_along_the_ray():
    sim = synth.Simulator(_script([GROUND], noise=0.05, seed=3))
    cloud, _, _ = sim.frame(0)
    d = cloud.points / np.linalg.norm(cloud.points, axis=1, keepdims=True)
    el = np.degrees(np.arcsin(d[:, 2]))
    assert np.allclose(el, -30.0)
    assert np.std(np.linalg.norm(cloud.points, axis=1) - 4.0) > 0.01


def test_analytic_depth_of_wall():
    wall = {"center": [10.0, 0, 2], "normal": [-1, 0, 0], "u_axis": [0, 1, 0]}
    cam = {"fx": 100.0, "fy": 100.0, "cx": 31.5, "cy": 23.5, "width": 64, "height": 48, "times": [0.0]}
    sim = synth.Simulator(_script([wall], camera=cam))
    depth, ids = sim.camera_depth(0.0)
    assert np.allclose(depth.depth, 10.0) and np.all(ids == 0)


def test_analytic_depth_matches_brute_force():
    script = _cluttered(2)
    script.camera = synth.CameraSpec(np.array([[80.0, 0, 39.5], [0, 80, 29.5], [0, 0, 1]]), 80, 60,
                                     synth.forward_camera_extrinsic(), np.array([0.1]))
    sim = synth.Simulator(script)
    depth, ids = sim.camera_depth(0.1)
    pose = sim.camera_pose(0.1)
    cols, rows = np.meshgrid(np.arange(80.0), np.arange(60.0))
    dirs = np.c_[cols.ravel(), rows.ravel(), np.ones(cols.size)] @ np.linalg.inv(script.camera.K).T
    tz, ib = sim.cast_reference(np.broadcast_to(pose.u, dirs.shape), dirs @ pose.rotation.T, 0.1)
    assert np.array_equal(ids.ravel(), ib)
    f = np.isfinite(tz)
    assert np.abs(depth.depth.ravel()[f] - tz[f]).max() < 1e-9


def test_mover_mask_at_other_time():
    sim = synth.Simulator(synth.script_from_dict(scenes.crossing_scene(n_frames=50)))
    now = sim.mover_mask(3.0)
    same = sim.mover_mask(3.0, at_time=3.0)
    assert now.any() and np.all(same[now])
    before = sim.mover_mask(3.0, at_time=2.0)
    assert before.any() and (before & now).sum() < now.sum()


def test_vertical_resolution_is_coarsest_gap():
    s = synth.SensorSpec([2.0, 0.0, -1.0, 1.8])
    assert list(s.beams_deg) == [-1.0, 0.0, 1.8, 2.0]
    assert s.vertical_resolution_deg == pytest.approx(1.8)


def test_schedule_must_cover_sequence():
    d = scenes.crossing_scene(n_frames=20)
    d["movers"][0]["schedule"][1][0] = 1.0
    with pytest.raises(ValueError, match="does not cover"):
        synth.script_from_dict(d)


def _small_street():
    return scenes.street_scene(n_frames=6, camera_times=[0.21, 0.33], noise_sigma=0.02, h_res_deg=0.6)


def test_generate_round_trip(tmp_path):
    script = synth.script_from_dict(_small_street())
    synth.generate_sequence(script, tmp_path)
    m = dio.read_manifest(tmp_path / "manifest.yaml")
    sim = synth.Simulator(script)
    traj = m.load_trajectory()
    for i in range(6):
        cloud, _, pose = sim.frame(i)
        disk = dio.read_cloud_bin(m.clouds[i])
        assert np.allclose(disk.points, cloud.points, atol=1e-5)
        assert np.array_equal(dio.read_labels(m.truth_labels[i], len(disk)), cloud.labels)
        assert np.allclose(traj[i].matrix, pose.matrix, atol=1e-9)
    assert np.allclose(m.load_camera_times(), [0.21, 0.33])
    d0 = dio.read_depth(tmp_path / "truth_depth" / "000000.bin")
    assert np.allclose(d0.depth, sim.camera_depth(0.21)[0].depth, equal_nan=True)


def test_generate_is_deterministic(tmp_path):
    script = synth.script_from_dict(_small_street())
    synth.generate_sequence(script, tmp_path / "a")
    synth.generate_sequence(script, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_empty_scene_gives_empty_frames(tmp_path):
    m = synth.generate_sequence(_script(), tmp_path)
    assert all(len(dio.read_cloud_bin(c)) == 0 for c in m.clouds)
