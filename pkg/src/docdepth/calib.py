"""Camera-to-LiDAR extrinsic calibration from matched checkerboard planes.

Camera-frame planes come from the intrinsic calibration tool; LiDAR-frame
planes are extracted here with RANSAC. Rotation is the orthogonal Procrustes
solution on the plane normals, translation a linear least-squares fit of the
plane offsets.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import io as dio
from .core import PointCloud, Pose
from .errors import CalibrationError, GeometryError

log = logging.getLogger(__name__)


@dataclass
class Plane:
    """Plane ``x . n - d = 0`` with unit normal ``n``; ``p`` is a point on it."""

    n: np.ndarray
    d: float
    p: Optional[np.ndarray] = None

    def __post_init__(self):
        n = np.asarray(self.n, dtype=float).reshape(3)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise GeometryError("plane normal must be non-zero")
        self.n = n / norm
        self.d = float(self.d) / norm
        if self.p is None:
            self.p = self.n * self.d
        else:
            self.p = np.asarray(self.p, dtype=float).reshape(3)

    def distance(self, points):
        return np.asarray(points, dtype=float) @ self.n - self.d

    def oriented_to_origin(self) -> "Plane":
        """Flip so the normal points into the half-space containing the origin."""
        if self.d > 0:
            return Plane(-self.n, -self.d, self.p)
        return self


@dataclass
class CalibrationView:
    camera_plane: Plane
    cloud: PointCloud
    crop: Optional[Tuple[np.ndarray, np.ndarray]] = None


@dataclass
class CalibrationResult:
    C_cl: Pose
    used_views: List[int]
    skipped_views: List[int]
    angle_residuals_deg: np.ndarray
    offset_residuals_m: np.ndarray
    lidar_planes: List[Optional[Plane]] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "used_views": self.used_views,
            "skipped_views": self.skipped_views,
            "angle_residual_deg": [float(v) for v in self.angle_residuals_deg],
            "offset_residual_m": [float(v) for v in self.offset_residuals_m],
        }


def fit_plane_lsq(points) -> Plane:
    """Total least-squares plane through ``points`` (PCA)."""
    points = np.asarray(points, dtype=float)
    c = points.mean(axis=0)
    _, s, vt = np.linalg.svd(points - c, full_matrices=False)
    n = vt[-1]
    return Plane(n, float(n @ c), c)


def _check_spread(points):
    if len(points) < 3:
        raise GeometryError("degenerate plane input: fewer than 3 points")
    c = points - points.mean(axis=0)
    s = np.linalg.svd(c, compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1e-300):
        raise GeometryError("degenerate plane input: points are collinear")


def ransac_plane(cloud: PointCloud, iters: int = 500, inlier_tol: float = 0.02,
                 crop=None, seed: int = 0):
    """Find the dominant plane of a cloud.

    Args:
        cloud: points in the LiDAR frame.
        iters: number of 3-point hypotheses.
        inlier_tol: maximum point-to-plane distance of an inlier (m).
        crop: optional ``(lo, hi)`` axis-aligned box; points outside are ignored.
        seed: RNG seed. The stream is also keyed on the cloud content so the
            result does not depend on which view is processed first.

    Returns:
        ``(plane, inlier_indices)`` with the normal oriented toward the sensor
        origin and indices into ``cloud.points``.
    """
    pts = cloud.points
    idx = np.arange(len(pts))
    if crop is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in crop)
        keep = np.all((pts >= lo) & (pts <= hi), axis=1)
        pts, idx = pts[keep], idx[keep]
    _check_spread(pts)

    rng = np.random.default_rng([seed, zlib.crc32(np.ascontiguousarray(pts).tobytes())])
    n = len(pts)
    best_count, best_plane = -1, None
    batch = max(1, min(iters, 2_000_000 // max(n, 1)))
    done = 0
    while done < iters:
        m = min(batch, iters - done)
        done += m
        sample = np.stack([rng.choice(n, 3, replace=False) for _ in range(m)])
        a, b, c = pts[sample[:, 0]], pts[sample[:, 1]], pts[sample[:, 2]]
        normals = np.cross(b - a, c - a)
        norms = np.linalg.norm(normals, axis=1)
        ok = norms > 1e-12
        if not ok.any():
            continue
        normals = normals[ok] / norms[ok, None]
        offsets = np.einsum("ij,ij->i", normals, a[ok])
        counts = (np.abs(pts @ normals.T - offsets) <= inlier_tol).sum(axis=0)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_plane = Plane(normals[k], offsets[k])
    if best_plane is None:
        raise GeometryError("degenerate plane input: no valid hypothesis")

    plane = best_plane
    inliers = np.abs(plane.distance(pts)) <= inlier_tol
    for _ in range(2):
        if inliers.sum() < 3:
            break
        plane = fit_plane_lsq(pts[inliers])
        inliers = np.abs(plane.distance(pts)) <= inlier_tol
    plane = plane.oriented_to_origin()
    return Plane(plane.n, plane.d), idx[inliers]


def solve_rotation(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Rotation ``R`` minimising ``sum |n_l - R n_c|^2`` over normal pairs."""
    nc = np.array([np.asarray(a, dtype=float) for a, _ in pairs]).reshape(-1, 3)
    nl = np.array([np.asarray(b, dtype=float) for _, b in pairs]).reshape(-1, 3)
    if len(nc) < 2:
        raise CalibrationError("rotation unobservable: need at least 2 plane pairs")
    s = np.linalg.svd(nc, compute_uv=False)
    if s[1] < 1e-6 * s[0]:
        raise CalibrationError("rotation unobservable: camera normals are parallel")
    H = nc.T @ nl
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R


def solve_translation(pairs: Sequence[Tuple[Plane, Plane]], R) -> np.ndarray:
    """Translation ``u`` minimising ``sum (n_l . (R p_c + u) - d_l)^2``."""
    R = np.asarray(R, dtype=float)
    A = np.array([pl.n for _, pl in pairs]).reshape(-1, 3)
    b = np.array([pl.d - pl.n @ (R @ pc.p) for pc, pl in pairs])
    if len(A) < 3:
        raise CalibrationError("translation unobservable: need at least 3 plane pairs")
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] < 1e-6 * s[0]:
        raise CalibrationError("translation unobservable: LiDAR normals do not span 3D")
    u, *_ = np.linalg.lstsq(A, b, rcond=None)
    return u


def calibrate(views: Sequence[CalibrationView], iters: int = 500, inlier_tol: float = 0.02,
              min_inliers: int = 30, seed: int = 0) -> CalibrationResult:
    """Extrinsic ``C^{c->l}`` from a set of views; views without a plane are skipped."""
    if len(views) < 3:
        raise CalibrationError("calibration needs at least 3 views")
    lidar_planes: List[Optional[Plane]] = []
    used, skipped = [], []
    for i, v in enumerate(views):
        try:
            plane, inl = ransac_plane(v.cloud, iters, inlier_tol, v.crop, seed)
            if len(inl) < min_inliers:
                raise GeometryError(f"only {len(inl)} inliers")
        except GeometryError as e:
            log.warning("view %d skipped: no plane found (%s)", i, e)
            lidar_planes.append(None)
            skipped.append(i)
            continue
        lidar_planes.append(plane)
        used.append(i)

    cam = [views[i].camera_plane for i in used]
    lid = [lidar_planes[i] for i in used]
    R = solve_rotation([(c.n, l.n) for c, l in zip(cam, lid)])
    u = solve_translation(list(zip(cam, lid)), R)

    ang = np.array([math.degrees(math.acos(np.clip((R @ c.n) @ l.n, -1.0, 1.0))) for c, l in zip(cam, lid)])
    off = np.array([l.n @ (R @ c.p + u) - l.d for c, l in zip(cam, lid)])
    return CalibrationResult(Pose.from_rt(R, u), used, skipped, ang, off, lidar_planes)


# ----------------------------------------------------------------------------
# session files

@dataclass
class CalibrationSession:
    """Intrinsics plus matched views, as read from a session YAML file.

    Layout::

        K: [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]
        width: 1280
        height: 720
        distortion: [k1, k2, p1, p2, k3]      # optional
        views:
          - camera_plane: {n: [..], d: .., p: [..]}
            cloud: views/000.bin               # relative to the session file
            crop: [[xmin, ymin, zmin], [xmax, ymax, zmax]]   # optional
    """

    K: np.ndarray
    width: int
    height: int
    views: List[CalibrationView]
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(5))


def read_session(path) -> CalibrationSession:
    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    missing = [k for k in ("K", "width", "height", "views") if k not in data]
    if missing:
        raise CalibrationError(f"{path}: session lacks {missing}")
    views = []
    for i, v in enumerate(data["views"]):
        try:
            cp = v["camera_plane"]
            plane = Plane(cp["n"], cp["d"], cp.get("p"))
            cloud = dio.read_cloud_bin(path.parent / v["cloud"])
        except KeyError as e:
            raise CalibrationError(f"{path}: view {i} lacks {e}") from None
        crop = v.get("crop")
        views.append(CalibrationView(plane, cloud, None if crop is None else (np.asarray(crop[0]), np.asarray(crop[1]))))
    return CalibrationSession(np.asarray(data["K"], dtype=float), int(data["width"]), int(data["height"]), views,
                              np.asarray(data.get("distortion", np.zeros(5)), dtype=float))


def write_session(path, session: CalibrationSession):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = []
    for i, v in enumerate(session.views):
        rel = f"views/{i:03d}.bin"
        dio.write_cloud_bin(path.parent / rel, v.cloud.points)
        item = {"camera_plane": {"n": v.camera_plane.n.tolist(), "d": float(v.camera_plane.d),
                                 "p": v.camera_plane.p.tolist()}, "cloud": rel}
        if v.crop is not None:
            item["crop"] = [np.asarray(v.crop[0]).tolist(), np.asarray(v.crop[1]).tolist()]
        out.append(item)
    data = {"K": np.asarray(session.K).tolist(), "width": int(session.width), "height": int(session.height),
            "distortion": np.asarray(session.distortion).tolist(), "views": out}
    path.write_text(yaml.safe_dump(data, sort_keys=False))
