"""Preset scene scripts used by the CLI, the tests and the acceptance suite.

Every preset returns the structured-text form (a plain dict, angles in
degrees) so it can be written to YAML and fed back to ``docdepth synth``.
"""
from __future__ import annotations

import math

import numpy as np

from .calib import CalibrationView, Plane
from .core import PointCloud, Pose
from .synth import PlanePrim, SensorSpec, Simulator, SceneScript, ypr_matrix


def _ground(half=(math.inf, math.inf), center=(0.0, 0.0, 0.0), name="ground"):
    return {"name": name, "center": list(center), "normal": [0.0, 0.0, 1.0], "u_axis": [1.0, 0.0, 0.0],
            "half_extents": list(half), "ground": True}


def _box(center, half, yaw_deg=0.0, name="box"):
    return {"name": name, "center": list(map(float, center)), "half_extents": list(map(float, half)),
            "yaw_deg": float(yaw_deg)}


def _camera(times, fx=400.0, width=640, height=240, translation=(0.27, 0.0, -0.08), pitch_deg=0.0):
    return {"fx": fx, "fy": fx, "cx": (width - 1) / 2.0, "cy": (height - 1) / 2.0,
            "width": width, "height": height,
            "extrinsic": {"translation": list(translation), "pitch_deg": pitch_deg},
            "times": times}


def _sensor(beams, h_res_deg, noise_sigma, beam_range=(-24.9, 2.0), max_range=100.0):
    layout = ({"min_deg": beam_range[0], "max_deg": beam_range[1], "count": int(beams)}
              if np.isscalar(beams) else [float(b) for b in beams])
    return {"beams": layout, "h_res_deg": h_res_deg, "max_range": max_range, "min_range": 1.0,
            "noise_sigma": noise_sigma}


def dense_center_beams(low=(-24.9, -5.0, 16), center=(-4.4, 2.0, 32)):
    """Elevations (deg) of a 48-beam sensor: sparse downward beams and a band
    spaced 0.2 deg around the horizon."""
    return np.round(np.r_[np.linspace(*low), np.linspace(*center)], 4).tolist()


def street_scene(n_frames=200, rate=10.0, speed=5.0, beams=None, h_res_deg=0.3,
                 beam_range=(-24.9, 2.0), noise_sigma=0.0, seed=0, movers=True,
                 camera_times=None, second_sensor=False, max_range=100.0,
                 oncoming_half=(6.0, 1.25, 1.6), oncoming_speed=8.0,
                 lead_half=(2.3, 0.95, 0.75), lead_gap=8.0, lead_speed=6.5):
    """Straight urban street: buildings on both sides with alleys, parked
    cars, poles, an end building and (optionally) two moving cars."""
    duration = (n_frames - 1) / rate
    length = speed * duration
    beams = dense_center_beams() if beams is None else beams
    boxes = []
    # building blocks with alley gaps
    x = -40.0
    k = 0
    while x < length + 110:
        w = 18.0 + 6.0 * (k % 3)
        h = 9.0 + 3.0 * (k % 4)
        boxes.append(_box((x + w / 2, 24.0, h / 2), (w / 2, 15.0, h / 2), name=f"bldg_l{k}"))
        boxes.append(_box((x + w / 2 + 7.0, -24.5, (h + 2) / 2), (w / 2, 15.0, (h + 2) / 2), name=f"bldg_r{k}"))
        x += w + 4.0
        k += 1
    end_x = length + 110.0
    boxes.append(_box((end_x + 5.0, 0.0, 12.0), (5.0, 30.0, 12.0), name="end_building"))
    # parked cars and poles
    for i, px in enumerate(np.arange(-10.0, length + 60.0, 23.0)):
        side = 6.3 if i % 2 == 0 else -6.3
        boxes.append(_box((px, side, 0.75), (2.2, 0.9, 0.75), yaw_deg=2.0 * ((i % 3) - 1), name=f"parked{i}"))
    for i, px in enumerate(np.arange(-5.0, length + 60.0, 15.0)):
        boxes.append(_box((px, 8.0, 3.0), (0.12, 0.12, 3.0), name=f"pole_l{i}"))
        boxes.append(_box((px + 7.0, -8.2, 3.0), (0.12, 0.12, 3.0), name=f"pole_r{i}"))

    d = {
        "seed": seed,
        "frames": {"count": n_frames, "rate": rate, "t0": 0.0},
        "trajectory": [[0.0, 0.0, -1.75, 1.8, 0.0], [duration / 2, length / 2, -1.75, 1.8, 0.0],
                       [duration, length, -1.25, 1.8, 0.6]],
        "sensor": _sensor(beams, h_res_deg, noise_sigma, beam_range, max_range),
        "planes": [_ground()],
        "boxes": boxes,
        "movers": [],
    }
    if movers:
        d["movers"] = [
            # oncoming bus in the opposite lane
            {"name": "oncoming", "half_extents": list(oncoming_half),
             "schedule": [[0.0, length + 40.0, 1.9, oncoming_half[2], 180.0],
                          [duration, length + 40.0 - oncoming_speed * duration, 1.9, oncoming_half[2], 180.0]]},
            # car ahead in the ego lane, slowly pulling away
            {"name": "lead", "half_extents": list(lead_half),
             "schedule": [[0.0, lead_gap, -1.75, lead_half[2], 0.0],
                          [duration, lead_gap + lead_speed * duration, -1.6, lead_half[2], 0.0]]},
        ]
    if camera_times is None:
        camera_times = {"start": 1.03, "step": 1.0, "count": int(duration) - 1}
    d["camera"] = _camera(camera_times)
    if second_sensor:
        d["second_sensor"] = {
            "sensor": {"beams": {"min_deg": -30.0, "max_deg": 10.0, "count": 32}, "h_res_deg": 0.3,
                       "max_range": max_range, "min_range": 1.0, "noise_sigma": noise_sigma},
            "mount": {"translation": [0.4, -0.6, 0.25], "ypr_deg": [-20.0, 12.0, 3.0]},
        }
    return d


def facade_scene(n_frames=120, rate=10.0, speed=4.0, beams=64, h_res_deg=0.4, noise_sigma=0.0, seed=0,
                 camera_times=None):
    """Camera facing a building front across a plaza, with a kiosk (box) in
    front of the facade. Used for render fidelity and see-through checks."""
    duration = (n_frames - 1) / rate
    length = speed * duration
    d = {
        "seed": seed,
        "frames": {"count": n_frames, "rate": rate, "t0": 0.0},
        # drive toward the facade
        "trajectory": [[0.0, 0.0, 0.0, 1.8, 0.0], [duration, length, 0.0, 1.8, 0.0]],
        "sensor": {"beams": {"min_deg": -25.0, "max_deg": 15.0, "count": beams}, "h_res_deg": h_res_deg,
                   "max_range": 100.0, "min_range": 1.0, "noise_sigma": noise_sigma},
        "planes": [_ground()],
        "boxes": [
            _box((length + 22.0, 0.0, 10.0), (3.0, 40.0, 10.0), name="facade"),
            _box((length + 11.0, 1.0, 1.5), (1.0, 1.5, 1.5), name="kiosk"),
            _box((length / 2, 14.0, 6.0), (length / 2 + 30, 3.0, 6.0), name="side_l"),
            _box((length / 2, -14.0, 6.0), (length / 2 + 30, 3.0, 6.0), name="side_r"),
        ],
        "movers": [],
    }
    if camera_times is None:
        camera_times = [duration * 0.75 + 0.03]
    d["camera"] = _camera(camera_times)
    return d


def crossing_scene(n_frames=60, rate=10.0, speed=5.0, beams=None, h_res_deg=0.3, noise_sigma=0.0, seed=0,
                   cross_x=35.0, cross_speed=10.0, cross_time=3.0, camera_times=None):
    """Car crossing the road ahead of the ego vehicle, centred in front of
    the camera at ``cross_time``; buildings behind it give free-space evidence."""
    duration = (n_frames - 1) / rate
    length = speed * duration
    y0 = cross_speed * cross_time
    beams = dense_center_beams() if beams is None else beams
    d = {
        "seed": seed,
        "frames": {"count": n_frames, "rate": rate, "t0": 0.0},
        "trajectory": [[0.0, 0.0, 0.0, 1.8, 0.0], [duration, length, 0.0, 1.8, 0.0]],
        "sensor": _sensor(beams, h_res_deg, noise_sigma),
        "planes": [_ground()],
        "boxes": [_box((cross_x + 30.0, 0.0, 6.0), (4.0, 60.0, 6.0), name="row_far"),
                  _box((length / 2, 16.0, 5.0), (8.0, 3.0, 5.0), name="house_l"),
                  _box((length / 2 + 12.0, -16.0, 4.0), (6.0, 3.0, 4.0), name="house_r")],
        "movers": [{"name": "crossing", "half_extents": [2.2, 0.9, 0.75],
                    "schedule": [[0.0, cross_x, y0, 0.75, -90.0],
                                 [duration, cross_x, y0 - cross_speed * duration, 0.75, -90.0]]}],
    }
    d["camera"] = _camera([cross_time] if camera_times is None else camera_times)
    return d


def patch_scene(kind="flat", n_frames=40, noise_sigma=0.0, seed=0):
    """Small test scenes for the ground stage.

    ``kind``: ``flat``, ``corner`` (flat ground + wall), ``step`` (3 cm step)
    or ``ramp`` (10 deg ramp rising from the flat ground).
    """
    planes = []
    boxes = []
    if kind in ("flat", "corner"):
        planes.append(_ground())
        if kind == "corner":
            boxes.append(_box((15.0, 8.0, 3.0), (15.0, 0.5, 3.0), name="wall"))
    elif kind == "step":
        planes.append(_ground(half=(200.0, 200.0), center=(-190.0, 0.0, 0.0), name="low"))
        planes.append(_ground(half=(200.0, 200.0), center=(210.0, 0.0, 0.03), name="high"))
    elif kind == "ramp":
        a = math.radians(10.0)
        planes.append(_ground(half=(200.0, 200.0), center=(-190.0, 0.0, 0.0), name="flat"))
        L = 30.0
        planes.append({"name": "ramp", "center": [10.0 + L / 2 * math.cos(a), 0.0, L / 2 * math.sin(a)],
                       "normal": [-math.sin(a), 0.0, math.cos(a)], "u_axis": [math.cos(a), 0.0, math.sin(a)],
                       "half_extents": [L / 2, 200.0], "ground": True})
    else:
        raise ValueError(kind)
    rate = 10.0
    duration = (n_frames - 1) / rate
    return {
        "seed": seed,
        "frames": {"count": n_frames, "rate": rate, "t0": 0.0},
        "trajectory": [[0.0, 0.0, 0.0, 1.8, 0.0], [duration, 0.5 * duration * 10 / 2, 0.0, 1.8, 0.0]],
        "sensor": {"beams": {"min_deg": -25.0, "max_deg": 5.0, "count": 48}, "h_res_deg": 0.5,
                   "max_range": 25.0, "min_range": 1.0, "noise_sigma": noise_sigma},
        "planes": planes,
        "boxes": boxes,
        "movers": [],
    }


# ----------------------------------------------------------------------------
# calibration rigs

A0_HALF = (0.4205, 0.5945)


def synthetic_calibration(C_cl: Pose, n_views=5, noise_sigma=0.0, seed=0, h_res_deg=0.2, beams=64,
                          with_ground=True):
    """Checkerboard views for a camera/LiDAR pair with known extrinsic.

    Returns ``(views, board_poses)``. Camera planes are exact; LiDAR clouds are
    ray-cast (board + ground) with range noise, and each view carries a crop
    box around the board.
    """
    rng = np.random.default_rng(seed)
    placements = [
        # (distance, lateral, height, yaw, pitch) of the board in the LiDAR frame
        (4.0, 0.0, 0.2, 0.0, 0.0),
        (5.0, 1.5, 0.0, 35.0, 10.0),
        (4.5, -1.4, 0.4, -35.0, -5.0),
        (6.0, 0.3, 0.8, 10.0, 30.0),
        (3.5, -0.4, -0.5, -10.0, -30.0),
        (5.5, 2.0, 0.3, 45.0, -15.0),
        (4.0, -2.0, -0.2, -40.0, 20.0),
    ]
    views, boards = [], []
    sensor = SensorSpec(np.linspace(-25.0, 15.0, beams), h_res_deg, 50.0, 0.5, noise_sigma)
    for i in range(n_views):
        dist, lat, hgt, yaw, pitch = placements[i % len(placements)]
        if i >= len(placements):
            dist += 0.5 * (i // len(placements))
        # board normal faces the sensor (-x), then tilted
        R = ypr_matrix(math.radians(yaw) + math.pi, math.radians(pitch), 0.0)
        center = np.array([dist, lat, hgt])
        n_l = R[:, 0]
        u_l, v_l = R[:, 1], R[:, 2]
        board = PlanePrim(center, n_l, u_l, A0_HALF, name="board")
        prims = [board]
        if with_ground:
            prims.append(PlanePrim([0.0, 0.0, -1.6], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0], ground=True, name="ground"))
        script = SceneScript(prims, [], [], sensor, np.array([[0.0, 0, 0, 0, 0], [1.0, 0, 0, 0, 0]]),
                             np.array([0.0]), seed=int(rng.integers(1 << 31)))
        sim = Simulator(script)
        cloud, _, _ = sim.frame(0)
        # camera-frame plane: x_c on plane <=> (R_cl x_c + u) . n_l = n_l . center
        R_cl, u_cl = C_cl.rotation, C_cl.u
        n_c = R_cl.T @ n_l
        p_c = R_cl.T @ (center - u_cl)
        d_c = float(n_c @ p_c)
        cam_plane = Plane(n_c, d_c, p_c).oriented_to_origin()
        cam_plane = Plane(cam_plane.n, cam_plane.d, p_c)
        margin = 0.3
        ext = np.abs(u_l) * A0_HALF[0] + np.abs(v_l) * A0_HALF[1] + margin
        crop = (center - ext, center + ext)
        views.append(CalibrationView(cam_plane, PointCloud(cloud.points), crop))
        boards.append(board)
    return views, boards
