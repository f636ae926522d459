"""Dynamic object classification by key-frame free-space voting.

Each key frame becomes a minimum-range spherical image. Every non-ground
point of the query frame is moved into the key frame, projected, and
compared against a ``w x w`` pixel window: points lying in observed free
space vote dynamic, points on an observed surface vote static, and points
hidden behind a surface abstain. A point is dynamic when it collects more
dynamic than static votes.
"""
from __future__ import annotations

import logging
import math
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import _kernels
from .core import Label, PointCloud, RangeImage, Trajectory, build_range_image, spherical_project

log = logging.getLogger(__name__)

VOTE_NONE = _kernels.VOTE_NONE
VOTE_STATIC = _kernels.VOTE_STATIC
VOTE_DYNAMIC = _kernels.VOTE_DYNAMIC


@dataclass(frozen=True)
class KeyFrameParams:
    d_fine: float = 2.0      # fine sampling spacing (m)
    R_fine: float = 20.0     # fine selection radius (m)
    d_coarse: float = 10.0
    R_coarse: float = 50.0

    def __post_init__(self):
        if not (0 < self.d_fine <= self.d_coarse):
            raise ValueError("need 0 < d_fine <= d_coarse")
        if not (0 < self.R_fine <= self.R_coarse):
            raise ValueError("need 0 < R_fine <= R_coarse")

    @classmethod
    def single(cls, R, d):
        """A single sampling set, as in the fine/coarse ablation."""
        return cls(d_fine=d, R_fine=R, d_coarse=d, R_coarse=R)


@dataclass(frozen=True)
class VotingParams:
    dtheta: float = math.radians(0.2)
    dphi: float = math.radians(0.2)
    tau: float = 0.2
    w: int = 5

    def __post_init__(self):
        if self.w < 1 or self.w % 2 == 0:
            raise ValueError("vote window w must be odd and >= 1")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not (self.dtheta > 0 and self.dphi > 0):
            raise ValueError("angular resolutions must be positive")


@dataclass
class VoteTally:
    c_s: np.ndarray
    c_d: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n, dtype=np.int32), np.zeros(n, dtype=np.int32))

    @property
    def dynamic(self) -> np.ndarray:
        return self.c_d > self.c_s


def subsample_trajectory(arclen, spacing) -> np.ndarray:
    """Greedy arc-length subsampling: keep a pose once it is ``spacing`` past the last kept one."""
    kept = [0]
    last = arclen[0]
    for i in range(1, len(arclen)):
        if arclen[i] - last >= spacing:
            kept.append(i)
            last = arclen[i]
    return np.array(kept, dtype=np.int64)


class KeyFrameSelector:
    """Caches the fine and coarse subsampled trajectories."""

    def __init__(self, traj: Trajectory, params: KeyFrameParams = KeyFrameParams()):
        self.traj = traj
        self.params = params
        self.fine = subsample_trajectory(traj.arclen, params.d_fine)
        self.coarse = subsample_trajectory(traj.arclen, params.d_coarse)

    def __call__(self, query: int) -> List[int]:
        arc = self.traj.arclen
        p = self.params
        fine = self.fine[np.abs(arc[self.fine] - arc[query]) < p.R_fine]
        coarse = self.coarse[np.abs(arc[self.coarse] - arc[query]) < p.R_coarse]
        sel = np.union1d(fine, coarse)
        return [int(j) for j in sel if j != query]


def select_key_frames(traj: Trajectory, query_index: int,
                      params: KeyFrameParams = KeyFrameParams()) -> List[int]:
    if not 0 <= query_index < len(traj):
        raise IndexError("query frame outside trajectory")
    return KeyFrameSelector(traj, params)(query_index)


def vote(projected, key_image: RangeImage, params: VotingParams = VotingParams()) -> int:
    """Single free-space vote of a point already projected as ``(row, col, rho)``
    into the key image. Returns one of ``VOTE_NONE/STATIC/DYNAMIC``."""
    r, c, rho = projected
    return int(_kernels.vote_one(int(r), int(c), float(rho), key_image.range, key_image.is_ground,
                                 float(params.tau), int(params.w)))


def vote_point(p, key_image: RangeImage, params: VotingParams = VotingParams()) -> int:
    """:func:`vote` for a 3-vector in key-frame sensor coordinates."""
    return vote(spherical_project(p, key_image.dphi, key_image.dtheta), key_image, params)


class KeyImageCache:
    """Memoised key range images, built at most once while resident.

    ``max_images`` bounds memory (a 0.2 deg image is ~8 MB); ``None`` keeps
    everything.
    """

    def __init__(self, load_frame: Callable[[int], PointCloud], params: VotingParams,
                 max_images: Optional[int] = None):
        self.load_frame = load_frame
        self.params = params
        self.max_images = max_images
        self._images: "OrderedDict[int, RangeImage]" = OrderedDict()
        self._lock = threading.Lock()
        self._building: Dict[int, threading.Event] = {}
        self.builds = 0
        self.hits = 0

    def __len__(self):
        return len(self._images)

    def get(self, j: int) -> RangeImage:
        while True:
            with self._lock:
                img = self._images.get(j)
                if img is not None:
                    self._images.move_to_end(j)
                    self.hits += 1
                    return img
                ev = self._building.get(j)
                if ev is None:
                    ev = threading.Event()
                    self._building[j] = ev
                    break
            ev.wait()
        try:
            img = build_range_image(self.load_frame(j), self.params.dphi, self.params.dtheta)
            with self._lock:
                self._images[j] = img
                self.builds += 1
                while self.max_images is not None and len(self._images) > self.max_images:
                    self._images.popitem(last=False)
        finally:
            with self._lock:
                del self._building[j]
            ev.set()
        return img


def tally_votes(points: np.ndarray, query_pose, key_poses, key_images: Sequence[RangeImage],
                params: VotingParams) -> VoteTally:
    """Accumulate votes of ``points`` (query sensor frame) over key images."""
    pts = np.ascontiguousarray(points, dtype=np.float64)
    tally = VoteTally.zeros(len(pts))
    for kp, img in zip(key_poses, key_images):
        rel = kp.inverse() * query_pose
        _kernels.accumulate_votes(pts, np.ascontiguousarray(rel.rotation), np.ascontiguousarray(rel.u),
                                  img.range, img.is_ground, float(params.dphi), float(params.dtheta),
                                  float(params.tau), int(params.w), tally.c_s, tally.c_d)
    return tally


def classify_frame(frame: PointCloud, query_index: int, traj: Trajectory, key_images,
                   kf: KeyFrameParams = KeyFrameParams(), vp: VotingParams = VotingParams(),
                   selector: Optional[KeyFrameSelector] = None, return_tally: bool = False):
    """Label one frame {Ground, Static, Dynamic}.

    ``frame.labels`` must carry the Ground flags of the ground stage.
    ``key_images`` is a :class:`KeyImageCache` or any object with ``get(j)``.
    """
    ground = frame.label_mask(Label.GROUND)
    labels = np.where(ground, Label.GROUND, Label.STATIC).astype(np.uint8)
    selector = selector or KeyFrameSelector(traj, kf)
    keys = selector(query_index)
    cand = np.flatnonzero(~ground)
    tally = VoteTally.zeros(len(cand))
    if not keys:
        log.warning("frame %d: no key frames available, non-ground points left static", query_index)
    elif cand.size:
        images = [key_images.get(j) for j in keys]
        tally = tally_votes(frame.points[cand], traj[query_index], [traj[j] for j in keys], images, vp)
        labels[cand[tally.dynamic]] = Label.DYNAMIC
    if return_tally:
        return labels, tally, keys
    return labels


def classify_sequence(load_frame: Callable[[int], PointCloud], traj: Trajectory,
                      kf: KeyFrameParams = KeyFrameParams(), vp: VotingParams = VotingParams(),
                      workers: int = 1, indices=None, cache_size: Optional[int] = 96,
                      on_frame: Optional[Callable[[int, np.ndarray, float], None]] = None) -> List[np.ndarray]:
    """Classify frames of a sequence; frames are processed in trajectory order.

    ``load_frame(i)`` must return the frame with Ground labels. Results do not
    depend on ``workers``.
    """
    indices = list(range(len(traj))) if indices is None else list(indices)
    selector = KeyFrameSelector(traj, kf)
    cache = KeyImageCache(load_frame, vp, max_images=cache_size)

    def one(i):
        t0 = time.perf_counter()
        labels = classify_frame(load_frame(i), i, traj, cache, kf, vp, selector)
        dt = time.perf_counter() - t0
        if on_frame is not None:
            on_frame(i, labels, dt)
        return labels

    if workers <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, indices))
