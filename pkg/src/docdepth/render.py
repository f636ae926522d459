"""Composite depth rendering through a software z-buffer.

Static points are aggregated from every selected frame around the camera
time; dynamic points come only from the temporally closest frame. Each point
is drawn as a flat vertical ellipse whose size shrinks with distance.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .core import Label, PointCloud, Pose, Trajectory, interpolate_pose
from .errors import SelectionError
from .io import CameraRig, DepthMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderParams:
    d_min: float = 5.0          # distance behind the camera (m)
    d_max: float = 120.0        # forward range (m)
    d_step: float = 0.2         # minimum spacing between used frames (m)
    d_crop: float = 60.0        # per-frame range crop for static points (m)
    sigma_min: float = 1.0      # splat width bounds (px)
    sigma_max: float = 9.0
    elongation: float = 2.0     # ellipse height / width
    sigma_min_dyn: Optional[float] = None
    sigma_max_dyn: Optional[float] = None
    lidar_vres_deg: float = 0.4     # used to derive the dynamic splat size
    lidar_hres_deg: float = 0.2

    def __post_init__(self):
        for name in ("d_min", "d_max", "d_step", "d_crop", "sigma_min", "sigma_max", "elongation",
                     "lidar_vres_deg", "lidar_hres_deg"):
            if not getattr(self, name) > 0:
                raise ValueError(f"render parameter {name} must be positive")
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max")
        if (self.sigma_min_dyn is not None and self.sigma_max_dyn is not None
                and self.sigma_min_dyn > self.sigma_max_dyn):
            raise ValueError("sigma_min_dyn must not exceed sigma_max_dyn")

    def dynamic_bounds(self, rig: CameraRig) -> Tuple[float, float]:
        """Dynamic splat size bounds.

        Unless given explicitly, a splat spans one LiDAR beam spacing
        vertically and one azimuth step horizontally, as seen by the camera
        at the image corner where angular steps project largest. For a
        non-uniform beam layout ``lidar_vres_deg`` should be the coarsest
        spacing, otherwise movers render with holes.
        """
        fx, fy, cx, cy = rig.K[0, 0], rig.K[1, 1], rig.K[0, 2], rig.K[1, 2]
        x = max(cx, rig.width - 1 - cx) / fx
        y = max(cy, rig.height - 1 - cy) / fy
        v_px = fy * math.radians(self.lidar_vres_deg) * (1 + x * x + y * y) / math.sqrt(1 + x * x)
        h_px = fx * math.radians(self.lidar_hres_deg) * (1 + x * x)
        lo = self.sigma_min_dyn
        if lo is None:
            lo = max(v_px / self.elongation, h_px, 1.0)
        hi = self.sigma_max_dyn if self.sigma_max_dyn is not None else 2.0 * lo
        return lo, max(lo, hi)


TAG_SHIFT = 32


def encode_source(slot, index):
    """Pack a (frame slot, point index) pair into one z-buffer source tag."""
    return (np.int64(slot) << TAG_SHIFT) | np.asarray(index, dtype=np.int64)


def decode_source(tags):
    """Inverse of :func:`encode_source`; untouched pixels (-1) decode to (-1, -1)."""
    tags = np.asarray(tags, dtype=np.int64)
    slot = np.where(tags >= 0, tags >> TAG_SHIFT, -1)
    idx = np.where(tags >= 0, tags & ((1 << TAG_SHIFT) - 1), -1)
    return slot, idx


@dataclass
class RenderResult:
    depth: DepthMap
    dynamic_mask: np.ndarray       # pixels whose nearest splat is a dynamic point
    static_frames: List[int]
    dynamic_frame: int
    source: Optional[np.ndarray] = None   # winning splat per pixel, see ``source_frames``

    @property
    def density(self):
        return self.depth.density

    def source_frames(self):
        """Per-pixel ``(frame index, point index)`` of the winning splat, -1 where empty."""
        if self.source is None:
            raise ValueError("render was run without source tracking")
        slot, idx = decode_source(self.source)
        lut = np.array(list(self.static_frames) + [self.dynamic_frame], dtype=np.int64)
        frame = np.where(slot >= 0, lut[np.clip(slot, 0, len(lut) - 1)], -1)
        return frame, idx


def select_render_frames(traj: Trajectory, t_cam: float, params: RenderParams = RenderParams()):
    """Frames in the signed-arc window around the camera, thinned by ``d_step``,
    and the index of the temporally closest frame."""
    s_cam = traj.arclen_at(t_cam)
    d = traj.arclen - s_cam
    window = np.flatnonzero((d > -params.d_min) & (d < params.d_max))
    if window.size == 0:
        raise SelectionError(f"no frames near camera time {t_cam}")
    kept = [int(window[0])]
    for k in window[1:]:
        if traj.arclen[k] - traj.arclen[kept[-1]] >= params.d_step:
            kept.append(int(k))
    closest = int(np.argmin(np.abs(traj.times - t_cam)))
    return kept, closest


def camera_from_lidar(T_k: Pose, T_cam: Pose, rig: CameraRig) -> Pose:
    """Transform taking points of LiDAR frame ``k`` into the camera frame."""
    return (T_cam * rig.C_cl).inverse() * T_k


def project_points(points_l, T_k: Pose, T_cam: Pose, rig: CameraRig):
    """Pinhole projection of LiDAR points; returns ``(u, v, z, p_c)``.

    Points with ``z <= 0`` are behind the camera and get NaN pixel coordinates.
    """
    pc = camera_from_lidar(T_k, T_cam, rig).apply(points_l)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = pc @ rig.K.T
        u = np.where(z > 0, uvw[:, 0] / z, np.nan)
        v = np.where(z > 0, uvw[:, 1] / z, np.nan)
    return u, v, z, pc


def project_point(p_l, T_k: Pose, T_cam: Pose, rig: CameraRig):
    """Single-point projection: ``(u, v, z)`` or ``None`` when behind the camera."""
    u, v, z, _ = project_points(np.asarray(p_l, dtype=float).reshape(1, 3), T_k, T_cam, rig)
    if not z[0] > 0:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def splat_size(p_c, sigma_min, sigma_max):
    """``max(sigma_max / ln |p|^2, sigma_min)``, capped at ``sigma_max`` where the
    logarithm drops below 1. Works on one point or an ``(N, 3)`` array."""
    p_c = np.asarray(p_c, dtype=float)
    n2 = np.sum(p_c * p_c, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = np.log(n2)
        s = np.where(lg > 1.0, np.maximum(sigma_max / lg, sigma_min), sigma_max)
    return float(s) if s.ndim == 0 else s


def _draw(points_l, tags, T_k, T_cam, rig, smin, smax, elongation, dynamic, buffers):
    if len(points_l) == 0:
        return
    u, v, z, pc = project_points(points_l, T_k, T_cam, rig)
    front = z > 0
    if not front.any():
        return
    u, v, z, pc, tags = u[front], v[front], z[front], pc[front], tags[front]
    sig = splat_size(pc, smin, smax)
    half_w = np.ascontiguousarray(sig / 2.0)
    half_h = np.ascontiguousarray(sig * elongation / 2.0)
    flags = np.full(len(z), dynamic, dtype=np.bool_)
    _kernels.splat_ellipses(np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(z),
                            half_w, half_h, flags, np.ascontiguousarray(tags), *buffers)


def render_depth(static_frames: Sequence[Tuple[PointCloud, Pose]],
                 dynamic_frame: Optional[Tuple[PointCloud, Pose]],
                 T_cam: Pose, rig: CameraRig, params: RenderParams = RenderParams(),
                 return_source: bool = False):
    """Render one depth map.

    Args:
        static_frames: ``(cloud, T_k)`` pairs; Static and Ground points are drawn.
        dynamic_frame: the temporally closest ``(cloud, T_k)``; its Dynamic points are drawn.
        T_cam: LiDAR pose interpolated at the camera timestamp.
        return_source: also return the per-pixel source tags (slot = position in
            ``static_frames``, the dynamic frame uses slot ``len(static_frames)``).

    Returns:
        ``(DepthMap, dynamic_mask)`` or ``(DepthMap, dynamic_mask, source)``.
    """
    depth = np.full((rig.height, rig.width), np.inf)
    dyn_mask = np.zeros((rig.height, rig.width), dtype=np.bool_)
    source = np.full((rig.height, rig.width), -1, dtype=np.int64)
    buffers = (depth, dyn_mask, source)
    for slot, (cloud, T_k) in enumerate(static_frames):
        if len(cloud) == 0:
            continue
        keep = np.linalg.norm(cloud.points, axis=1) < params.d_crop
        if cloud.labels is not None:
            keep &= (cloud.labels == Label.STATIC) | (cloud.labels == Label.GROUND)
        idx = np.flatnonzero(keep)
        _draw(cloud.points[idx], encode_source(slot, idx), T_k, T_cam, rig, params.sigma_min,
              params.sigma_max, params.elongation, False, buffers)
    if dynamic_frame is not None:
        cloud, T_k = dynamic_frame
        if cloud.labels is not None and len(cloud):
            lo, hi = params.dynamic_bounds(rig)
            idx = np.flatnonzero(cloud.labels == Label.DYNAMIC)
            _draw(cloud.points[idx], encode_source(len(static_frames), idx), T_k, T_cam, rig, lo, hi,
                  params.elongation, True, buffers)
    if return_source:
        return DepthMap(depth), dyn_mask, source
    return DepthMap(depth), dyn_mask


def render_at(t_cam: float, load_frame: Callable[[int], PointCloud], traj: Trajectory,
              rig: CameraRig, params: RenderParams = RenderParams()) -> RenderResult:
    """Select frames for ``t_cam`` and render. ``load_frame`` returns DOC-labelled clouds."""
    frames, closest = select_render_frames(traj, t_cam, params)
    T_cam = interpolate_pose(traj, t_cam)
    static = [(load_frame(k), traj[k]) for k in frames]
    depth, mask, source = render_depth(static, (load_frame(closest), traj[closest]), T_cam, rig, params,
                                       return_source=True)
    return RenderResult(depth, mask, frames, closest, source)


def render_sequence(load_frame, traj: Trajectory, camera_times, rig: CameraRig,
                    params: RenderParams = RenderParams(), workers: int = 1,
                    on_result: Optional[Callable[[int, RenderResult], None]] = None) -> List[RenderResult]:
    def one(j_t):
        j, t = j_t
        res = render_at(float(t), load_frame, traj, rig, params)
        if on_result is not None:
            on_result(j, res)
        return res

    items = list(enumerate(camera_times))
    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, items))
