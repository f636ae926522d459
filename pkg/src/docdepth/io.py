"""Readers and writers for every on-disk format the pipeline touches.

Formats:
    * clouds: KITTI Velodyne ``.bin`` (little-endian float32 x, y, z, intensity)
    * poses: KITTI 3x4 row-major matrices, or TUM ``t x y z qx qy qz qw``
    * labels: one byte per point (0 unlabeled, 1 ground, 2 static, 3 dynamic)
    * depth: 16-bit PNG at 1/256 m (0 = invalid) and a lossless float32 dump
    * rigs, manifests, calibration sessions: YAML
"""
from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml
from PIL import Image

from .core import PointCloud, Pose, Trajectory, quat_from_matrix
from .errors import CorruptFileError, InvalidRotationError

log = logging.getLogger(__name__)

PNG_SCALE = 256.0
PNG_MAX_DEPTH = 255.99

# SemanticKITTI moving classes (car, bicyclist, person, motorcyclist,
# on-rails, bus, truck, other-vehicle)
MOVING_CLASS_IDS = frozenset(range(252, 260))


# ----------------------------------------------------------------------------
# point clouds / labels

def read_cloud_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise CorruptFileError(f"corrupt cloud file: {path} has {len(raw)} bytes")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(data[:, :3])):
        raise CorruptFileError(f"corrupt cloud file: {path} has non-finite coordinates")
    return PointCloud(data[:, :3].astype(np.float64), frame_id="sensor")


def read_cloud_intensity(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise CorruptFileError(f"corrupt cloud file: {path}")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, 3].copy()


def write_cloud_bin(path, points, intensity=None):
    points = np.asarray(points)
    data = np.zeros((len(points), 4), dtype="<f4")
    data[:, :3] = points
    if intensity is not None:
        data[:, 3] = intensity
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data.tobytes())


def write_labels(path, labels):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(np.asarray(labels, dtype=np.uint8).tobytes())


def read_labels(path, n_points: Optional[int] = None) -> np.ndarray:
    labels = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).copy()
    if n_points is not None and len(labels) != n_points:
        raise CorruptFileError(f"{path}: {len(labels)} labels for {n_points} points")
    if labels.size and labels.max() > 3:
        raise CorruptFileError(f"{path}: label value out of range")
    return labels


def read_semantic_labels(path, n_points: Optional[int] = None,
                         moving_ids=MOVING_CLASS_IDS) -> np.ndarray:
    """Per-point dynamic flags from a SemanticKITTI ``.label`` file."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise CorruptFileError(f"corrupt label file: {path}")
    sem = np.frombuffer(raw, dtype="<u4") & 0xFFFF
    if n_points is not None and len(sem) != n_points:
        raise CorruptFileError(f"{path}: {len(sem)} labels for {n_points} points")
    return np.isin(sem, np.fromiter(moving_ids, dtype=np.uint32))


# ----------------------------------------------------------------------------
# poses

def _check_rotation(R, lineno):
    if abs(np.linalg.det(R) - 1.0) > 1e-3 or np.abs(R.T @ R - np.eye(3)).max() > 1e-3:
        raise InvalidRotationError(f"invalid rotation on line {lineno}")


def read_poses(path, format: str = "tum", times=None) -> Trajectory:
    """Load a trajectory.

    ``kitti_matrix`` lines carry no timestamps; pass ``times`` (sequence or a
    path to a one-per-line file) or frames are stamped 0, 1, 2, ...
    """
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    poses = []
    if format == "kitti_matrix":
        if isinstance(times, (str, os.PathLike)):
            times = read_times(times)
        for k, ln in enumerate(lines):
            vals = _floats(ln, 12, path, k)
            T = np.eye(4)
            T[:3, :] = np.array(vals).reshape(3, 4)
            _check_rotation(T[:3, :3], k + 1)
            t = float(times[k]) if times is not None else float(k)
            poses.append(Pose(T[:3, 3], quat_from_matrix(T[:3, :3]), t))
        if times is not None and len(times) != len(poses):
            raise CorruptFileError(f"{path}: {len(poses)} poses but {len(times)} timestamps")
    elif format == "tum":
        for k, ln in enumerate(lines):
            t, x, y, z, qx, qy, qz, qw = _floats(ln, 8, path, k)
            poses.append(Pose([x, y, z], [qw, qx, qy, qz], t))
    else:
        raise ValueError(f"unknown pose format {format!r}")
    return Trajectory(poses)


def _floats(line, n, path, k):
    parts = line.split()
    if len(parts) != n:
        raise CorruptFileError(f"{path}:{k + 1}: expected {n} values, got {len(parts)}")
    try:
        return [float(v) for v in parts]
    except ValueError as e:
        raise CorruptFileError(f"{path}:{k + 1}: {e}") from None


def write_poses(path, traj, format: str = "tum"):
    rows = []
    for p in traj:
        if format == "tum":
            w, x, y, z = p.q
            rows.append(" ".join(repr(float(v)) for v in (p.t, *p.u, x, y, z, w)))
        elif format == "kitti_matrix":
            rows.append(" ".join(repr(float(v)) for v in p.matrix[:3, :].reshape(-1)))
        else:
            raise ValueError(f"unknown pose format {format!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(rows) + "\n")


def read_times(path) -> np.ndarray:
    try:
        return np.loadtxt(path, dtype=float, ndmin=1)
    except ValueError as e:
        raise CorruptFileError(f"{path}: {e}") from None


def write_times(path, times):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{float(t)!r}\n" for t in times))


# ----------------------------------------------------------------------------
# depth maps

@dataclass
class DepthMap:
    """Per-pixel z-depth in metres; invalid pixels hold +inf."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)

    @classmethod
    def empty(cls, width, height):
        return cls(np.full((height, width), np.inf))

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @property
    def density(self) -> float:
        return float(self.valid.mean()) if self.depth.size else 0.0


def write_depth_png(depth_map: DepthMap, path) -> int:
    """Write a 16-bit KITTI-style depth PNG. Returns the number of clamped pixels."""
    d = depth_map.depth
    valid = np.isfinite(d) & (d > 0)
    over = valid & (d > PNG_MAX_DEPTH)
    n_over = int(over.sum())
    if n_over:
        log.warning("%d pixels beyond %.2f m clamped in %s", n_over, PNG_MAX_DEPTH, path)
    enc = np.zeros(d.shape, dtype=np.uint16)
    enc[valid] = np.round(np.minimum(d[valid], PNG_MAX_DEPTH) * PNG_SCALE).astype(np.uint16)
    # depths below 1/512 m would round to the invalid code
    enc[valid & (enc == 0)] = 1
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(enc).save(path, format="PNG")
    return n_over


def read_depth_png(path) -> DepthMap:
    try:
        with Image.open(path) as im:
            enc = np.array(im)
    except (OSError, SyntaxError) as e:
        raise CorruptFileError(f"corrupt depth png {path}: {e}") from None
    if enc.ndim != 2:
        raise CorruptFileError(f"{path}: expected a single-channel image")
    d = enc.astype(np.float64) / PNG_SCALE
    d[enc == 0] = np.inf
    return DepthMap(d)


def write_depth_bin(depth_map: DepthMap, path):
    """Lossless float32 dump: ``<u4 rows, <u4 cols`` then row-major ``<f4`` (0 = invalid)."""
    d = depth_map.depth.astype("<f4")
    d[~np.isfinite(d)] = 0.0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(struct.pack("<II", *d.shape) + d.tobytes())


def read_depth_bin(path) -> DepthMap:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CorruptFileError(f"corrupt depth dump {path}")
    rows, cols = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * rows * cols:
        raise CorruptFileError(f"corrupt depth dump {path}: size mismatch")
    d = np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols).astype(np.float64)
    d[d <= 0] = np.inf
    return DepthMap(d)


def read_depth(path) -> DepthMap:
    path = Path(path)
    return read_depth_png(path) if path.suffix == ".png" else read_depth_bin(path)


# ----------------------------------------------------------------------------
# rigs

@dataclass
class CameraRig:
    """Rectified pinhole camera with its camera-to-LiDAR extrinsic."""

    K: np.ndarray
    C_cl: Pose
    width: int
    height: int
    distortion: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float).reshape(3, 3)
        self.distortion = np.asarray(self.distortion, dtype=float).reshape(-1)
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0:
            raise ValueError("K must be upper-triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must have positive focal lengths")
        R = self.C_cl.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise InvalidRotationError("rig extrinsic is not orthonormal")

    def to_dict(self):
        return {
            "K": self.K.tolist(),
            "distortion": self.distortion.tolist(),
            "width": int(self.width),
            "height": int(self.height),
            "C_cl": self.C_cl.matrix.reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        T = np.asarray(d["C_cl"], dtype=float).reshape(4, 4)
        _check_rotation(T[:3, :3], 0)
        return cls(np.asarray(d["K"]), Pose.from_matrix(T), int(d["width"]), int(d["height"]),
                   np.asarray(d.get("distortion", np.zeros(5))))


def write_rig(path, rig: CameraRig, report=None):
    data = rig.to_dict()
    if report is not None:
        data["residuals"] = report
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def read_rig(path) -> CameraRig:
    return CameraRig.from_dict(yaml.safe_load(Path(path).read_text()))


# ----------------------------------------------------------------------------
# sequence manifests

@dataclass
class SequenceManifest:
    clouds: List[Path]
    poses: Path
    camera_times: Path
    rig: Path
    output_dir: Path
    pose_format: str = "tum"
    lidar_times: Optional[Path] = None
    truth_labels: Optional[List[Path]] = None
    root: Path = Path(".")

    def load_trajectory(self) -> Trajectory:
        traj = read_poses(self.poses, self.pose_format, self.lidar_times)
        if len(traj) != len(self.clouds):
            raise CorruptFileError(f"{len(self.clouds)} clouds but {len(traj)} poses")
        return traj

    def load_camera_times(self) -> np.ndarray:
        return read_times(self.camera_times)

    def load_rig(self) -> CameraRig:
        return read_rig(self.rig)


def _rel(root, p):
    try:
        return str(Path(p).relative_to(root))
    except ValueError:
        return str(p)


def write_manifest(path, m: SequenceManifest):
    root = Path(path).parent
    data = {
        "clouds": [_rel(root, c) for c in m.clouds],
        "poses": _rel(root, m.poses),
        "pose_format": m.pose_format,
        "camera_times": _rel(root, m.camera_times),
        "rig": _rel(root, m.rig),
        "output_dir": _rel(root, m.output_dir),
    }
    if m.lidar_times is not None:
        data["lidar_times"] = _rel(root, m.lidar_times)
    if m.truth_labels is not None:
        data["truth_labels"] = [_rel(root, c) for c in m.truth_labels]
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def read_manifest(path, output_root=None, check_files=True) -> SequenceManifest:
    """Load a manifest; relative paths resolve against the manifest's directory.

    ``output_root`` (or the ``DOCDEPTH_OUTPUT_ROOT`` environment variable)
    overrides the output directory.
    """
    path = Path(path)
    root = path.parent
    data = yaml.safe_load(path.read_text())
    known = {"clouds", "poses", "pose_format", "camera_times", "rig", "output_dir",
             "lidar_times", "truth_labels"}
    unknown = set(data) - known
    if unknown:
        raise CorruptFileError(f"{path}: unknown manifest keys {sorted(unknown)}")

    def res(p):
        return p if p is None else (root / p)

    output_root = output_root or os.environ.get("DOCDEPTH_OUTPUT_ROOT")
    out = Path(output_root) if output_root else res(data.get("output_dir", "output"))
    if isinstance(data["clouds"], str):
        clouds = sorted((root / data["clouds"]).glob("*.bin"))
    else:
        clouds = [res(c) for c in data["clouds"]]
    m = SequenceManifest(
        clouds=clouds,
        poses=res(data["poses"]),
        camera_times=res(data["camera_times"]),
        rig=res(data["rig"]),
        output_dir=out,
        pose_format=data.get("pose_format", "tum"),
        lidar_times=res(data.get("lidar_times")),
        truth_labels=[res(c) for c in data["truth_labels"]] if data.get("truth_labels") else None,
        root=root,
    )
    if check_files:
        missing = [p for p in [*m.clouds, m.poses, m.camera_times, m.rig] if not Path(p).exists()]
        if m.lidar_times is not None and not m.lidar_times.exists():
            missing.append(m.lidar_times)
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:5]}")
        n_poses = len([ln for ln in Path(m.poses).read_text().splitlines() if ln.strip() and not ln.startswith("#")])
        if n_poses != len(m.clouds):
            raise CorruptFileError(f"{len(m.clouds)} clouds but {n_poses} poses")
    return m
