"""Geometric foundations: poses, trajectories, point clouds, range images and
spatial indices.

Quaternions are stored scalar-first, ``(w, x, y, z)``. A :class:`Pose` maps
points from its local frame into the parent frame: ``p_parent = R p + u``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import ExtrapolationError, GeometryError


class Label(enum.IntEnum):
    UNLABELED = 0
    GROUND = 1
    STATIC = 2
    DYNAMIC = 3


# ----------------------------------------------------------------------------
# quaternions

def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise GeometryError("zero quaternion")
    return q / n


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return np.array([math.cos(angle / 2.0), axis[0] * s, axis[1] * s, axis[2] * s])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    """Rotation matrix to unit quaternion (Shepperd's method), w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def quat_angle(a, b):
    """Geodesic angle (radians) between the rotations of two unit quaternions."""
    rel = quat_mul(quat_conj(a), b)
    # atan2 keeps full precision for tiny angles, where acos of the dot product does not
    return 2.0 * math.atan2(float(np.linalg.norm(rel[1:])), abs(float(rel[0])))


def quat_pow(q, alpha):
    """``q**alpha`` for a unit quaternion with non-negative scalar part."""
    vn = math.sqrt(q[1] ** 2 + q[2] ** 2 + q[3] ** 2)
    if vn < 1e-15:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = math.atan2(vn, q[0])
    s = math.sin(alpha * half) / vn
    return np.array([math.cos(alpha * half), q[1] * s, q[2] * s, q[3] * s])


def rotation_about_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ----------------------------------------------------------------------------
# poses

@dataclass(frozen=True)
class Pose:
    u: np.ndarray
    q: np.ndarray
    t: Optional[float] = None

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float).reshape(3)
        q = quat_normalize(np.asarray(self.q, dtype=float).reshape(4))
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls, t=None):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_matrix(cls, T, t=None):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, 3], quat_from_matrix(T[:3, :3]), t)

    @classmethod
    def from_rt(cls, R, u, t=None):
        return cls(u, quat_from_matrix(R), t)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.u
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_mul(self.q, other.q)
        u = self.rotation @ other.u + self.u
        return Pose(u, q, self.t)

    __mul__ = compose

    def inverse(self) -> "Pose":
        qi = quat_conj(self.q)
        return Pose(-(quat_to_matrix(qi) @ self.u), qi, self.t)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.u

    def with_time(self, t) -> "Pose":
        return Pose(self.u, self.q, t)


def pose_distance(a: Pose, b: Pose):
    """(translation distance, rotation angle) between two poses."""
    return float(np.linalg.norm(a.u - b.u)), quat_angle(a.q, b.q)


class Trajectory:
    """Timestamped poses with cumulative curvilinear arc length."""

    def __init__(self, poses: Sequence[Pose]):
        if len(poses) == 0:
            raise ValueError("empty trajectory")
        times = np.array([p.t for p in poses], dtype=float)
        if np.any(np.isnan(times)):
            raise ValueError("trajectory poses need timestamps")
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        self.poses = list(poses)
        self.times = times
        self.positions = np.array([p.u for p in poses])
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        self.arclen = np.concatenate([[0.0], np.cumsum(steps)])

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> Pose:
        return self.poses[i]

    @property
    def t_first(self) -> float:
        return float(self.times[0])

    @property
    def t_last(self) -> float:
        return float(self.times[-1])

    def signed_distance(self, i, j) -> float:
        """Curvilinear distance from pose ``i`` to pose ``j`` (positive when j is later)."""
        return float(self.arclen[j] - self.arclen[i])

    def arclen_at(self, t) -> float:
        """Arc length at time ``t`` along the piecewise-linear trajectory."""
        if t < self.times[0] or t > self.times[-1]:
            raise ExtrapolationError("extrapolation requested")
        return float(np.interp(t, self.times, self.arclen))

    def interpolate(self, t) -> Pose:
        return interpolate_pose(self, t)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """Pose at time ``t``: linear in translation, slerp in rotation.

    The rotation follows ``q_i (q_i^-1 q_{i+1})^alpha`` along the shortest arc.
    """
    times = traj.times
    if not (times[0] <= t <= times[-1]):
        raise ExtrapolationError(
            f"extrapolation requested: t={t} outside [{times[0]}, {times[-1]}]")
    i = int(np.searchsorted(times, t, side="right")) - 1
    if times[i] == t:
        p = traj.poses[i]
        return Pose(p.u.copy(), p.q.copy(), float(t))
    a, b = traj.poses[i], traj.poses[i + 1]
    alpha = (t - times[i]) / (times[i + 1] - times[i])
    u = a.u + alpha * (b.u - a.u)
    rel = quat_mul(quat_conj(a.q), b.q)
    if rel[0] < 0:
        rel = -rel
    q = quat_normalize(quat_mul(a.q, quat_pow(rel, alpha)))
    return Pose(u, q, float(t))


# ----------------------------------------------------------------------------
# point clouds

@dataclass
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    frame_id: str = "sensor"
    timestamp: Optional[float] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.uint8)
            if labels.shape != (len(pts),):
                raise ValueError("labels must have one entry per point")
            self.labels = labels

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose, frame_id: str = "world") -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.labels, frame_id, self.timestamp)

    def select(self, mask) -> "PointCloud":
        labels = None if self.labels is None else self.labels[mask]
        return PointCloud(self.points[mask], labels, self.frame_id, self.timestamp)

    def label_mask(self, label: Label) -> np.ndarray:
        if self.labels is None:
            return np.zeros(len(self), dtype=bool)
        return self.labels == label


# ----------------------------------------------------------------------------
# spherical projection / range images

def image_shape(dphi, dtheta):
    return int(math.ceil(math.pi / dphi)), int(math.ceil(2.0 * math.pi / dtheta))


def spherical_project(p, dphi, dtheta):
    """Project one point to ``(row, col, rho)`` on a spherical grid."""
    x, y, z = (float(v) for v in p)
    if x == 0.0 and y == 0.0 and z == 0.0:
        raise GeometryError("degenerate point")
    rows, cols = image_shape(dphi, dtheta)
    r, c, rho = _kernels.project_one(x, y, z, float(dphi), float(dtheta), rows, cols)
    return int(r), int(c), float(rho)


def project_points(points, dphi, dtheta):
    """Vectorised :func:`spherical_project`; zero-norm points are not allowed."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(~points.any(axis=1)):
        raise GeometryError("degenerate point")
    rows, cols = image_shape(dphi, dtheta)
    return _kernels.project_many(points, float(dphi), float(dtheta), rows, cols)


@dataclass
class RangeImage:
    dphi: float
    dtheta: float
    range: np.ndarray
    is_ground: np.ndarray

    @classmethod
    def empty(cls, dphi, dtheta):
        rows, cols = image_shape(dphi, dtheta)
        return cls(dphi, dtheta, np.full((rows, cols), np.inf, dtype=np.float32),
                   np.zeros((rows, cols), dtype=bool))

    @property
    def rows(self):
        return self.range.shape[0]

    @property
    def cols(self):
        return self.range.shape[1]

    @property
    def valid(self):
        return np.isfinite(self.range)


def build_range_image(cloud: PointCloud, dphi, dtheta) -> RangeImage:
    """Minimum-range spherical image of a cloud in its own sensor frame.

    Each pixel keeps the smallest range of the points falling into it and the
    ground flag of that nearest point. Ranges are stored as float32.
    """
    img = RangeImage.empty(dphi, dtheta)
    if len(cloud) == 0:
        return img
    ground = cloud.label_mask(Label.GROUND)
    pts = np.ascontiguousarray(cloud.points, dtype=np.float64)
    _kernels.fill_range_image(pts, ground, float(dphi), float(dtheta), img.range, img.is_ground)
    return img


# ----------------------------------------------------------------------------
# spatial indices

class SpatialIndex:
    """Exact k-NN / radius queries over a fixed point set."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("spatial index needs at least one point")
        self._tree = cKDTree(self.points)

    def __len__(self):
        return len(self.points)

    def knn(self, query, k):
        """Indices of the ``k`` nearest points, closest first."""
        k = min(int(k), len(self.points))
        query = np.asarray(query, dtype=float).reshape(3)
        d, idx = self._tree.query(query, k=k)
        idx = np.atleast_1d(idx)
        d = np.atleast_1d(d)
        return idx[np.lexsort((idx, d))]

    def knn_batch(self, queries, k, workers=1):
        k = min(int(k), len(self.points))
        d, idx = self._tree.query(np.asarray(queries, dtype=float).reshape(-1, 3), k=k, workers=workers)
        if k == 1:
            d, idx = d[:, None], idx[:, None]
        return d, idx

    def radius(self, query, r):
        """Indices within distance ``r`` (inclusive), closest first."""
        query = np.asarray(query, dtype=float).reshape(3)
        idx = np.asarray(self._tree.query_ball_point(query, r), dtype=np.int64)
        if idx.size == 0:
            return idx
        d = np.linalg.norm(self.points[idx] - query, axis=1)
        return idx[np.lexsort((idx, d))]


def knn_search(index: SpatialIndex, query, k):
    return index.knn(query, k)


def radius_search(index: SpatialIndex, query, r):
    return index.radius(query, r)


@dataclass
class Downsampled:
    """Voxel-downsampled cloud with links back to the source points.

    ``representatives[v]`` is the source index kept for voxel ``v``;
    ``assignment[i]`` is the voxel of source point ``i``.
    """

    cloud: PointCloud
    representatives: np.ndarray
    assignment: np.ndarray = field(repr=False)

    def reproject(self, values):
        """Broadcast per-voxel values back onto every source point."""
        return np.asarray(values)[self.assignment]


def voxel_keys(points, s):
    q = np.floor(np.asarray(points, dtype=float) / s).astype(np.int64)
    q -= q.min(axis=0)
    span = q.max(axis=0) + 1
    return (q[:, 0] * span[1] + q[:, 1]) * span[2] + q[:, 2]


def voxel_downsample(cloud: PointCloud, s: float) -> Downsampled:
    """Keep, per occupied voxel of side ``s``, the point nearest the voxel centroid."""
    if s <= 0:
        raise ValueError("voxel size must be positive")
    n = len(cloud)
    if n == 0:
        return Downsampled(PointCloud(np.zeros((0, 3)), frame_id=cloud.frame_id),
                           np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    pts = cloud.points
    _, inverse, counts = np.unique(voxel_keys(pts, s), return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    centroid = np.empty((m, 3))
    for a in range(3):
        centroid[:, a] = np.bincount(inverse, weights=pts[:, a], minlength=m) / counts
    d2 = ((pts - centroid[inverse]) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), d2, inverse))
    first = np.concatenate([[0], np.cumsum(counts)[:-1]])
    reps = order[first]
    labels = None if cloud.labels is None else cloud.labels[reps]
    ds = PointCloud(pts[reps], labels, cloud.frame_id, cloud.timestamp)
    return Downsampled(ds, reps, inverse)
