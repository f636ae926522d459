"""Synthetic LiDAR sequences with exact ground truth.

Scenes are built from finite planes and oriented boxes plus rigid boxes that
move along piecewise-linear schedules. A spinning LiDAR is ray-cast against
the scene at every frame time; a pinhole camera is ray-cast per pixel for
analytic depth. Every returned point carries its truth label (ground /
static / dynamic) and the id of the primitive it hit.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml
from PIL import Image

from . import _kernels
from . import io as dio
from .core import Label, PointCloud, Pose, Trajectory, rotation_about_z

log = logging.getLogger(__name__)

EPS = 1e-9

# camera optical frame (x right, y down, z forward) expressed in a
# forward-looking sensor frame (x forward, y left, z up)
CAMERA_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def ypr_matrix(yaw=0.0, pitch=0.0, roll=0.0):
    """``Rz(yaw) Ry(pitch) Rx(roll)``, angles in radians."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def forward_camera_extrinsic(translation=(0.0, 0.0, 0.0), yaw=0.0, pitch=0.0) -> Pose:
    """Camera-to-LiDAR pose for a camera looking along the LiDAR x axis.

    Positive ``pitch`` tilts the optical axis downward.
    """
    return Pose.from_rt(ypr_matrix(yaw, pitch, 0.0) @ CAMERA_AXES, translation)


# ----------------------------------------------------------------------------
# primitives

@dataclass
class PlanePrim:
    center: np.ndarray
    normal: np.ndarray
    u_axis: np.ndarray
    half_extents: Tuple[float, float] = (math.inf, math.inf)
    ground: bool = False
    name: str = "plane"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(self.u_axis, dtype=float)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        self.v_axis = np.cross(self.normal, self.u_axis)
        self.half_extents = tuple(float(h) for h in self.half_extents)

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origins) @ self.normal) / denom
        hit = (np.abs(denom) > 1e-12) & (t > EPS)
        if np.isfinite(self.half_extents[0]) or np.isfinite(self.half_extents[1]):
            p = origins + dirs * np.where(hit, t, 0.0)[:, None] - self.center
            hit &= (np.abs(p @ self.u_axis) <= self.half_extents[0]) & (np.abs(p @ self.v_axis) <= self.half_extents[1])
        return np.where(hit, t, np.inf)


@dataclass
class BoxPrim:
    center: np.ndarray
    half_extents: np.ndarray
    yaw: float = 0.0
    ground: bool = False
    name: str = "box"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)

    @property
    def rotation(self):
        return rotation_about_z(self.yaw)

    def intersect(self, origins, dirs):
        R = self.rotation
        o = (origins - self.center) @ R
        d = dirs @ R
        h = self.half_extents
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-h - o) * inv
            t2 = (h - o) * inv
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        # rays parallel to a slab: inside the slab -> unbounded, outside -> miss
        par = d == 0.0
        inside = np.abs(o) <= h
        lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
        hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
        tmin = lo.max(axis=1)
        tmax = hi.min(axis=1)
        hit = (tmax >= tmin) & (tmin > EPS)
        return np.where(hit, tmin, np.inf)

    def contains(self, points, tol=1e-6):
        local = (np.asarray(points) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + tol, axis=1)


@dataclass
class Mover:
    half_extents: np.ndarray
    schedule: np.ndarray  # rows of (t, x, y, z, yaw_rad)
    name: str = "mover"

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        self.schedule = np.asarray(self.schedule, dtype=float).reshape(-1, 5)
        if np.any(np.diff(self.schedule[:, 0]) <= 0):
            raise ValueError("mover schedule times must increase")

    def box_at(self, t) -> BoxPrim:
        s = self.schedule
        vals = [np.interp(t, s[:, 0], s[:, k]) for k in range(1, 5)]
        return BoxPrim(vals[:3], self.half_extents, vals[3], name=self.name)


# ----------------------------------------------------------------------------
# sensors and scripts

@dataclass
class SensorSpec:
    beams_deg: np.ndarray
    h_res_deg: float = 0.2
    max_range: float = 100.0
    min_range: float = 0.5
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.beams_deg = np.sort(np.asarray(self.beams_deg, dtype=float))

    @property
    def vertical_resolution_deg(self) -> float:
        """Coarsest spacing between adjacent beams."""
        b = self.beams_deg
        return float(np.max(np.diff(b))) if len(b) > 1 else 0.0

    def directions(self) -> np.ndarray:
        az = np.radians(np.arange(0.0, 360.0, self.h_res_deg))
        el = np.radians(self.beams_deg)
        E, A = np.meshgrid(el, az, indexing="ij")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass
class CameraSpec:
    K: np.ndarray
    width: int
    height: int
    C_cl: Pose
    times: np.ndarray

    def rig(self) -> dio.CameraRig:
        return dio.CameraRig(self.K, self.C_cl, self.width, self.height)


@dataclass
class SceneScript:
    planes: List[PlanePrim]
    boxes: List[BoxPrim]
    movers: List[Mover]
    sensor: SensorSpec
    waypoints: np.ndarray      # rows of (t, x, y, z, yaw_rad)
    frame_times: np.ndarray
    camera: Optional[CameraSpec] = None
    second_sensor: Optional[Tuple[SensorSpec, Pose]] = None
    seed: int = 0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 5)
        self.frame_times = np.asarray(self.frame_times, dtype=float)
        if len(self.frame_times):
            lo, hi = self.frame_times.min() + 1e-9, self.frame_times.max() - 1e-9
            spans = [("trajectory", self.waypoints[:, 0])] + [(m.name, m.schedule[:, 0]) for m in self.movers]
            for name, t in spans:
                if t[0] > lo or t[-1] < hi:
                    raise ValueError(f"schedule of {name} does not cover the sequence time span")


# ----------------------------------------------------------------------------
# ray casting

class Simulator:
    """Ray-casting oracle for one :class:`SceneScript`."""

    def __init__(self, script: SceneScript):
        self.script = script
        self.static = [*script.planes, *script.boxes]
        self.n_static = len(self.static)

    # ids: static primitives first, then movers
    def primitives_at(self, t, include_movers=True):
        prims = list(self.static)
        if include_movers:
            prims += [m.box_at(t) for m in self.script.movers]
        return prims

    def label_of(self, prim_id):
        """Truth labels for an array of primitive ids (-1 = no hit)."""
        prim_id = np.asarray(prim_id)
        ground = np.array([bool(p.ground) for p in self.static] + [False] * len(self.script.movers))
        out = np.full(prim_id.shape, Label.STATIC, dtype=np.uint8)
        out[prim_id >= self.n_static] = Label.DYNAMIC
        valid = prim_id >= 0
        g = np.zeros(prim_id.shape, dtype=bool)
        g[valid] = ground[prim_id[valid]]
        out[g] = Label.GROUND
        out[~valid] = Label.UNLABELED
        return out

    def cast(self, origin, dirs, t, include_movers=True):
        """Nearest hit parameter and primitive id per ray (inf / -1 on miss)
        for rays sharing one ``origin``."""
        prims = self.primitives_at(t, include_movers)
        planes = [p for p in prims if isinstance(p, PlanePrim)]
        boxes = [p for p in prims if isinstance(p, BoxPrim)]
        if prims != planes + boxes:
            return self.cast_reference(origin, dirs, t, include_movers)

        def stack(vals, shape):
            return np.ascontiguousarray(np.array(vals, dtype=float).reshape(shape))

        best, ids = _kernels.cast_rays(
            np.asarray(origin, dtype=float).reshape(3), np.ascontiguousarray(dirs, dtype=float),
            stack([p.center for p in planes], (-1, 3)), stack([p.normal for p in planes], (-1, 3)),
            stack([p.u_axis for p in planes], (-1, 3)), stack([p.v_axis for p in planes], (-1, 3)),
            stack([p.half_extents for p in planes], (-1, 2)),
            stack([b.center for b in boxes], (-1, 3)), stack([b.rotation for b in boxes], (-1, 3, 3)),
            stack([b.half_extents for b in boxes], (-1, 3)), EPS)
        return best, ids

    def cast_reference(self, origins, dirs, t, include_movers=True):
        """Pure numpy version of :meth:`cast` (one primitive at a time)."""
        origins = np.broadcast_to(np.asarray(origins, dtype=float), dirs.shape)
        best = np.full(len(dirs), np.inf)
        ids = np.full(len(dirs), -1, dtype=np.int64)
        for k, prim in enumerate(self.primitives_at(t, include_movers)):
            tk = prim.intersect(origins, dirs)
            closer = tk < best
            best[closer] = tk[closer]
            ids[closer] = k
        return best, ids

    def sensor_pose(self, t) -> Pose:
        w = self.script.waypoints
        vals = [np.interp(t, w[:, 0], w[:, k]) for k in range(1, 5)]
        return Pose.from_rt(rotation_about_z(vals[3]), vals[:3], float(t))

    def trajectory(self) -> Trajectory:
        return Trajectory([self.sensor_pose(t) for t in self.script.frame_times])

    def raycast_frame(self, t, pose: Pose, sensor: Optional[SensorSpec] = None, rng=None,
                      include_movers=True):
        """One LiDAR sweep at time ``t`` from ``pose`` (sensor to world).

        Returns ``(cloud, prim_ids)``; the cloud is in the sensor frame with
        truth labels.
        """
        sensor = sensor or self.script.sensor
        dirs_s = sensor.directions()
        dirs_w = dirs_s @ pose.rotation.T
        rng_t, ids = self.cast(pose.u, dirs_w, t, include_movers)
        keep = (rng_t >= sensor.min_range) & (rng_t <= sensor.max_range)
        r = rng_t[keep]
        if sensor.noise_sigma > 0:
            rng = rng if rng is not None else np.random.default_rng(0)
            r = r + rng.normal(0.0, sensor.noise_sigma, size=r.shape)
        pts = dirs_s[keep] * r[:, None]
        ids = ids[keep]
        return PointCloud(pts, self.label_of(ids), "sensor", float(t)), ids

    def frame(self, i, sensor=None, mount: Optional[Pose] = None, stream=0):
        t = float(self.script.frame_times[i])
        pose = self.sensor_pose(t)
        if mount is not None:
            pose = (pose * mount).with_time(t)
        rng = np.random.default_rng([self.script.seed, stream, i])
        cloud, ids = self.raycast_frame(t, pose, sensor, rng)
        return cloud, ids, pose

    def camera_pose(self, t, camera: Optional[CameraSpec] = None) -> Pose:
        cam = camera or self.script.camera
        return (self.sensor_pose(t) * cam.C_cl).with_time(t)

    def analytic_depth(self, t, cam_pose: Pose, K, width, height, include_movers=True):
        """Exact per-pixel z-depth and hit primitive id (pixel centres at integer coordinates)."""
        cols, rows = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
        pix = np.stack([cols.ravel(), rows.ravel(), np.ones(cols.size)], axis=1)
        dirs_c = pix @ np.linalg.inv(np.asarray(K, dtype=float)).T
        dirs_w = dirs_c @ cam_pose.rotation.T
        tz, ids = self.cast(cam_pose.u, dirs_w, t, include_movers)
        return dio.DepthMap(tz.reshape(height, width)), ids.reshape(height, width)

    def camera_depth(self, t, include_movers=True):
        cam = self.script.camera
        return self.analytic_depth(t, self.camera_pose(t), cam.K, cam.width, cam.height, include_movers)

    def mover_mask(self, t, mover_index=None, at_time=None):
        """Pixels whose nearest hit at ``t`` is a mover (optionally one mover, optionally
        posed at another time ``at_time`` while the camera stays at ``t``)."""
        cam = self.script.camera
        pose = self.camera_pose(t)
        if at_time is None:
            _, ids = self.analytic_depth(t, pose, cam.K, cam.width, cam.height)
            m = ids >= self.n_static
            if mover_index is not None:
                m = ids == self.n_static + mover_index
            return m
        movers = self.script.movers if mover_index is None else [self.script.movers[mover_index]]
        mask = np.zeros((cam.height, cam.width), dtype=bool)
        cols, rows = np.meshgrid(np.arange(cam.width, dtype=float), np.arange(cam.height, dtype=float))
        pix = np.stack([cols.ravel(), rows.ravel(), np.ones(cols.size)], axis=1)
        dirs_w = pix @ np.linalg.inv(cam.K).T @ pose.rotation.T
        for m in movers:
            tm = m.box_at(at_time).intersect(np.broadcast_to(pose.u, dirs_w.shape), dirs_w)
            mask |= np.isfinite(tm).reshape(cam.height, cam.width)
        return mask


# ----------------------------------------------------------------------------
# script files

def _arr(v):
    return np.asarray(v, dtype=float)


def _sensor_from(d) -> SensorSpec:
    beams = d["beams"]
    if isinstance(beams, dict):
        beams = np.linspace(beams["min_deg"], beams["max_deg"], int(beams["count"]))
    return SensorSpec(beams, float(d.get("h_res_deg", 0.2)), float(d.get("max_range", 100.0)),
                      float(d.get("min_range", 0.5)), float(d.get("noise_sigma", 0.0)))


def _times_from(d):
    if isinstance(d, dict):
        return d.get("start", 0.0) + d["step"] * np.arange(int(d["count"]))
    return _arr(d)


def _ypr_pose(d) -> Pose:
    ypr = np.radians(d.get("ypr_deg", [0.0, 0.0, 0.0]))
    return Pose.from_rt(ypr_matrix(*ypr), d.get("translation", [0.0, 0.0, 0.0]))


def _schedule(rows):
    rows = _arr(rows).reshape(-1, 5).copy()
    rows[:, 4] = np.radians(rows[:, 4])
    return rows


def script_from_dict(d) -> SceneScript:
    """Build a scene from its structured-text form (angles in degrees)."""
    planes = [PlanePrim(p["center"], p["normal"], p.get("u_axis", [1.0, 0.0, 0.0]),
                        tuple(p.get("half_extents", [math.inf, math.inf])), bool(p.get("ground", False)),
                        p.get("name", f"plane{i}")) for i, p in enumerate(d.get("planes", []))]
    boxes = [BoxPrim(b["center"], b["half_extents"], math.radians(b.get("yaw_deg", 0.0)),
                     bool(b.get("ground", False)), b.get("name", f"box{i}")) for i, b in enumerate(d.get("boxes", []))]
    movers = [Mover(m["half_extents"], _schedule(m["schedule"]), m.get("name", f"mover{i}"))
              for i, m in enumerate(d.get("movers", []))]
    frames = d["frames"]
    frame_times = _times_from(frames) if "step" in frames else (
        frames.get("t0", 0.0) + np.arange(int(frames["count"])) / float(frames["rate"]))
    camera = None
    if "camera" in d:
        c = d["camera"]
        K = np.array([[c["fx"], 0.0, c["cx"]], [0.0, c["fy"], c["cy"]], [0.0, 0.0, 1.0]])
        ext = c.get("extrinsic", {})
        if "matrix" in ext:
            C = Pose.from_matrix(_arr(ext["matrix"]).reshape(4, 4))
        else:
            yaw, pitch = np.radians(ext.get("yaw_deg", 0.0)), np.radians(ext.get("pitch_deg", 0.0))
            C = forward_camera_extrinsic(ext.get("translation", [0.0, 0.0, 0.0]), yaw, pitch)
        camera = CameraSpec(K, int(c["width"]), int(c["height"]), C, _times_from(c["times"]))
    second = None
    if "second_sensor" in d:
        s = d["second_sensor"]
        second = (_sensor_from(s["sensor"]), _ypr_pose(s.get("mount", {})))
    return SceneScript(planes, boxes, movers, _sensor_from(d["sensor"]), _schedule(d["trajectory"]),
                       frame_times, camera, second, int(d.get("seed", 0)))


def load_script(path) -> SceneScript:
    return script_from_dict(yaml.safe_load(Path(path).read_text()))


# ----------------------------------------------------------------------------
# sequence generation

def generate_sequence(script: SceneScript, out_dir, write_depth=True) -> dio.SequenceManifest:
    """Write clouds, exact poses, truth labels, camera times, rig and analytic
    depth maps under ``out_dir`` and return the manifest (also saved as
    ``manifest.yaml``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sim = Simulator(script)
    clouds, truths, poses = [], [], []
    for i in range(len(script.frame_times)):
        cloud, _, pose = sim.frame(i)
        cp, tp = out / "clouds" / f"{i:06d}.bin", out / "truth" / f"{i:06d}.label"
        dio.write_cloud_bin(cp, cloud.points)
        dio.write_labels(tp, cloud.labels)
        clouds.append(cp)
        truths.append(tp)
        poses.append(pose)
    dio.write_poses(out / "poses.txt", poses, "tum")

    cam = script.camera
    times = cam.times if cam is not None else np.zeros(0)
    dio.write_times(out / "camera_times.txt", times)
    if cam is not None:
        dio.write_rig(out / "rig.yaml", cam.rig())
        if write_depth:
            for j, t in enumerate(times):
                depth, ids = sim.camera_depth(float(t))
                dio.write_depth_bin(depth, out / "truth_depth" / f"{j:06d}.bin")
                mask = (ids >= sim.n_static).astype(np.uint8) * 255
                (out / "truth_dynamic").mkdir(exist_ok=True)
                Image.fromarray(mask).save(out / "truth_dynamic" / f"{j:06d}.png")

    if script.second_sensor is not None:
        sensor_b, mount = script.second_sensor
        poses_b = []
        for i in range(len(script.frame_times)):
            cloud, _, pose = sim.frame(i, sensor_b, mount, stream=1)
            dio.write_cloud_bin(out / "b" / "clouds" / f"{i:06d}.bin", cloud.points)
            dio.write_labels(out / "b" / "truth" / f"{i:06d}.label", cloud.labels)
            poses_b.append(pose)
        dio.write_poses(out / "b" / "poses.txt", poses_b, "tum")
        if cam is not None:
            rig_b = dio.CameraRig(cam.K, mount.inverse() * cam.C_cl, cam.width, cam.height)
            dio.write_rig(out / "b" / "rig.yaml", rig_b)

    sensor_info = {
        "vertical_resolution_deg": script.sensor.vertical_resolution_deg,
        "horizontal_resolution_deg": script.sensor.h_res_deg,
    }
    (out / "sensor.yaml").write_text(yaml.safe_dump(sensor_info))
    m = dio.SequenceManifest(clouds, out / "poses.txt", out / "camera_times.txt", out / "rig.yaml",
                             out / "output", "tum", None, truths, out)
    dio.write_manifest(out / "manifest.yaml", m)
    return m
