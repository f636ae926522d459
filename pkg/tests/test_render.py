import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docdepth import render, scenes, synth
from docdepth.core import Label, PointCloud, Pose, Trajectory
from docdepth.errors import SelectionError
from docdepth.io import CameraRig
from docdepth.render import RenderParams

from conftest import random_rotation


def _line_traj(xs, times=None):
    times = np.arange(len(xs), dtype=float) if times is None else times
    return Trajectory([Pose.from_rt(np.eye(3), [x, 0.0, 0.0], float(t)) for x, t in zip(xs, times)])


def _rig(f=200.0, w=160, h=120, C=None):
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1]])
    return CameraRig(K, C if C is not None else synth.forward_camera_extrinsic(), w, h)


def _wall(x, half=30.0, step=0.05, labels=Label.STATIC):
    g = np.arange(-half, half + 1e-9, step)
    y, z = np.meshgrid(g, g)
    pts = np.c_[np.full(y.size, x), y.ravel(), z.ravel()]
    return PointCloud(pts, np.full(len(pts), labels, np.uint8))


# -- frame selection ------------------------------------------------------------

def test_selection_keeps_window():
    traj = _line_traj(np.arange(200.0))
    frames, closest = render.select_render_frames(traj, 50.0, RenderParams(d_min=5, d_max=100, d_step=0.2))
    assert frames == list(range(46, 150)) and closest == 50


def test_selection_thinned_by_step():
    traj = _line_traj(np.arange(200.0))
    frames, _ = render.select_render_frames(traj, 50.0, RenderParams(d_min=5, d_max=100, d_step=2.0))
    assert frames == list(range(46, 150, 2))


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=40), st.data())
def test_closest_frame_matches_linear_scan(gaps, data):
    times = np.cumsum(gaps)
    traj = _line_traj(np.arange(len(times)) * 0.5, times)
    t = data.draw(st.floats(float(times[0]), float(times[-1])))
    _, closest = render.select_render_frames(traj, t, RenderParams(d_min=1e3, d_max=1e3))
    best = min(range(len(times)), key=lambda k: (abs(times[k] - t), k))
    assert abs(times[closest] - t) == abs(times[best] - t)


def test_empty_window():
    traj = _line_traj(np.arange(0, 1000.0, 100.0))
    with pytest.raises(SelectionError, match="no frames near camera time"):
        render.select_render_frames(traj, 0.5, RenderParams(d_min=0.1, d_max=0.1))


# -- projection -----------------------------------------------------------------

def _identity_rig(f=500.0, cx=320.0, cy=240.0):
    return CameraRig(np.array([[f, 0, cx], [0, f, cy], [0, 0, 1]]), Pose.identity(), 640, 480)


def test_projection_on_axis():
    I = Pose.identity()
    assert render.project_point([0, 0, 5], I, I, _identity_rig()) == (320.0, 240.0, 5.0)


def test_projection_offset():
    u, v, z = render.project_point([1, 0, 5], Pose.identity(), Pose.identity(), _identity_rig())
    assert u == pytest.approx(420.0) and v == pytest.approx(240.0)


def test_projection_behind():
    assert render.project_point([0, 0, -1], Pose.identity(), Pose.identity(), _identity_rig()) is None


def test_projection_round_trip(rng):
    for _ in range(100):
        T_k = Pose.from_rt(random_rotation(rng), rng.normal(size=3) * 10)
        T_cam = Pose.from_rt(random_rotation(rng), rng.normal(size=3) * 10)
        rig = CameraRig(np.array([[400.0, 0, 300], [0, 410, 200], [0, 0, 1]]),
                        Pose.from_rt(random_rotation(rng), rng.normal(size=3)), 600, 400)
        p = rng.normal(size=3) * 20
        res = render.project_point(p, T_k, T_cam, rig)
        if res is None:
            continue
        u, v, z = res
        pc = np.linalg.solve(rig.K, [u * z, v * z, z])
        back = T_k.inverse().apply((T_cam * rig.C_cl).apply(pc[None]))[0]
        assert np.abs(back - p).max() < 1e-9


# -- splat size -----------------------------------------------------------------

def test_splat_size_examples():
    assert render.splat_size([math.e, 0, 0], 1.0, 8.0) == pytest.approx(4.0)
    assert render.splat_size([1e6, 0, 0], 1.0, 8.0) == 1.0
    assert render.splat_size([0.5, 0, 0], 1.0, 8.0) == 8.0
    arr = render.splat_size(np.array([[math.e, 0, 0], [0.5, 0, 0]]), 1.0, 8.0)
    assert np.allclose(arr, [4.0, 8.0])


@given(st.floats(1.01, 1e4), st.floats(1.01, 1e4))
def test_splat_size_shrinks_with_distance(a, b):
    a, b = sorted((a, b))
    assert render.splat_size([b, 0, 0], 1.0, 9.0) <= render.splat_size([a, 0, 0], 1.0, 9.0)


def test_dynamic_bounds_match_projected_beam_spacing():
    rig = _rig(f=300.0, w=640, h=240)
    p = RenderParams(lidar_vres_deg=0.4, lidar_hres_deg=0.2, elongation=2.0)
    lo, hi = p.dynamic_bounds(rig)
    # finite-difference oracle: pixel step of one beam / one azimuth step at the image corner
    K = rig.K
    x = (rig.width - 1 - K[0, 2]) / K[0, 0]
    y = (rig.height - 1 - K[1, 2]) / K[1, 1]
    az, el = math.atan(x), math.atan(-y / math.sqrt(1 + x * x))

    def pix(a, e):
        d = np.array([math.cos(e) * math.sin(a), -math.sin(e), math.cos(e) * math.cos(a)])
        return (K @ d)[:2] / d[2]

    eps = 1e-7
    v_step = np.linalg.norm(pix(az, el + eps) - pix(az, el)) / eps * math.radians(0.4)
    # an azimuth step also drifts vertically off-axis; the tall ellipse covers that part
    h_step = abs(pix(az + eps, el)[0] - pix(az, el)[0]) / eps * math.radians(0.2)
    assert lo * p.elongation >= v_step * 0.99
    assert lo >= h_step * 0.99
    assert lo == pytest.approx(max(v_step / 2.0, h_step), rel=0.01)
    assert hi == 2 * lo
    assert RenderParams(sigma_min_dyn=3.0, sigma_max_dyn=5.0).dynamic_bounds(rig) == (3.0, 5.0)


def test_params_validation():
    with pytest.raises(ValueError):
        RenderParams(sigma_min=5.0, sigma_max=2.0)
    with pytest.raises(ValueError):
        RenderParams(d_step=0.0)


# -- z-buffer -------------------------------------------------------------------

def test_wall_fills_view():
    rig = _rig()
    depth, dyn = render.render_depth([(_wall(10.0), Pose.identity())], None, Pose.identity(), rig)
    assert depth.density == 1.0
    assert np.all(depth.depth == 10.0)
    assert not dyn.any()


def test_near_box_occludes_far_wall():
    rig = _rig()
    box = _wall(5.0, half=1.0, step=0.02)
    frames = [(_wall(10.0), Pose.identity()), (box, Pose.identity())]
    depth, _ = render.render_depth(frames, None, Pose.identity(), rig)
    # box face spans +-1 m at 5 m: +-40 px around the centre
    inner = depth.depth[60 - 30:60 + 30, 80 - 30:80 + 30]
    assert np.all(inner == 5.0)
    assert depth.depth[0, 0] == 10.0


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_adding_points_never_increases_depth(seed):
    rng = np.random.default_rng(seed)
    rig = _rig(w=64, h=48, f=60.0)
    a = PointCloud(rng.uniform([2, -5, -5], [30, 5, 5], (200, 3)))
    b = PointCloud(rng.uniform([2, -5, -5], [30, 5, 5], (200, 3)))
    d1, _ = render.render_depth([(a, Pose.identity())], None, Pose.identity(), rig)
    d2, _ = render.render_depth([(a, Pose.identity()), (b, Pose.identity())], None, Pose.identity(), rig)
    assert np.all(d2.depth <= d1.depth)


def test_frame_order_irrelevant(rng):
    rig = _rig(w=64, h=48, f=60.0)
    frames = [(PointCloud(rng.uniform([2, -5, -5], [30, 5, 5], (300, 3))),
               Pose.from_rt(np.eye(3), rng.normal(size=3) * 0.3)) for _ in range(6)]
    a, _ = render.render_depth(frames, None, Pose.identity(), rig)
    b, _ = render.render_depth(frames[::-1], None, Pose.identity(), rig)
    assert np.array_equal(a.depth, b.depth)


def test_source_tags_round_trip(rng):
    slot = rng.integers(0, 1000, 50)
    idx = rng.integers(0, 2 ** 31, 50)
    s, i = render.decode_source(render.encode_source(slot, idx))
    assert np.array_equal(s, slot) and np.array_equal(i, idx)
    assert render.decode_source(np.array([-1]))[0][0] == -1


def test_source_tags_point_at_winning_points():
    rig = _rig(w=64, h=48, f=60.0)
    near = PointCloud(np.array([[5.0, 0, 0]]))
    far = _wall(20.0, half=10.0, step=0.5)
    depth, _, src = render.render_depth([(far, Pose.identity()), (near, Pose.identity())], None,
                                        Pose.identity(), rig, return_source=True)
    slot, idx = render.decode_source(src)
    assert slot[24, 32] == 1 and idx[24, 32] == 0 and depth.depth[24, 32] == 5.0
    valid = np.isfinite(depth.depth)
    assert np.all(slot[valid] >= 0) and np.all(slot[~valid] == -1)
    pts = [far.points, near.points]
    z = np.array([pts[s][i][0] for s, i in zip(slot[valid], idx[valid])])
    assert np.array_equal(z, depth.depth[valid])


def test_dynamic_points_only_from_closest_frame():
    rig = _rig(w=64, h=48, f=60.0)
    rng = np.random.default_rng(2)
    static = [(PointCloud(rng.uniform([5, -5, -5], [30, 5, 5], (300, 3)),
                          np.full(300, Label.STATIC, np.uint8)), Pose.identity()) for _ in range(3)]
    dyn = PointCloud(np.array([[8.0, 0, 0]]), np.array([Label.DYNAMIC], np.uint8))
    base, m0 = render.render_depth(static, (dyn, Pose.identity()), Pose.identity(), rig)
    # poison dynamic points into the static frames: they must be ignored
    poisoned = [(PointCloud(np.r_[c.points, rng.uniform([2, -1, -1], [3, 1, 1], (50, 3))],
                            np.r_[c.labels, np.full(50, Label.DYNAMIC, np.uint8)]), p) for c, p in static]
    again, m1 = render.render_depth(poisoned, (dyn, Pose.identity()), Pose.identity(), rig)
    assert np.array_equal(base.depth, again.depth) and np.array_equal(m0, m1)
    assert m0.any()


# -- simulator ----------------------------------------------------------------------

def test_moving_box_rendered_at_camera_time():
    d = scenes.crossing_scene(n_frames=50, camera_times=[2.0, 3.0])
    sim = synth.Simulator(synth.script_from_dict(d))
    traj = sim.trajectory()
    frames = [sim.frame(i)[0] for i in range(len(traj))]
    rig = sim.script.camera.rig()
    sensor = sim.script.sensor
    params = RenderParams(lidar_vres_deg=sensor.vertical_resolution_deg, lidar_hres_deg=sensor.h_res_deg)
    for t in (2.0, 3.0):
        res = render.render_at(t, lambda i: frames[i], traj, rig, params)
        now = sim.mover_mask(t, at_time=t)
        if not now.any():
            continue
        inter = (res.dynamic_mask & now).sum()
        assert inter / now.sum() > 0.9
        # nothing drawn where the box was one second earlier
        trail = sim.mover_mask(t, at_time=t - 1.0) & ~now
        assert trail.any() and not (res.dynamic_mask & trail).any()
