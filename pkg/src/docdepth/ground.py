"""Ground labelling by seeded region growing on aggregated trajectory chunks."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .core import PointCloud, Pose, Trajectory, voxel_downsample
from .errors import NoGroundSeedsError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundParams:
    s: float = 0.03          # voxel size (m)
    l: float = 500.0         # chunk length (m)
    r_seed: float = 2.0      # horizontal seed search radius (m)
    k_nn: int = 30
    alpha: float = 15.0      # max normal angle to vertical (deg)
    delta: float = 0.04      # point-to-plane threshold (m)
    seed_support_radius: float = 0.5

    def __post_init__(self):
        for name in ("s", "l", "r_seed", "k_nn", "alpha", "delta", "seed_support_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ground parameter {name} must be positive")
        if not self.alpha < 90:
            raise ValueError("alpha must be below 90 degrees")


def chunk_trajectory(traj: Trajectory, l: float) -> List[range]:
    """Split frame indices into contiguous chunks spanning at most ``l`` metres of arc."""
    arc = traj.arclen
    chunks = []
    start = 0
    n = len(arc)
    while start < n:
        end = int(np.searchsorted(arc, arc[start] + l, side="right"))
        end = max(end, start + 1)
        chunks.append(range(start, end))
        start = end
    return chunks


def find_seeds(merged: PointCloud, chunk_poses: Sequence[Pose], r_seed: float,
               min_support: int = 15, support_radius: float = 0.5,
               max_candidates: int = 64) -> np.ndarray:
    """Lowest point under each pose (in the XY plane), deduplicated.

    A candidate must have at least ``min_support`` neighbours within
    ``support_radius`` so that a stray return below the ground cannot
    become a seed; otherwise the next-lowest candidate is tried.
    """
    pts = merged.points
    if len(pts) == 0:
        raise NoGroundSeedsError("no ground seeds: empty cloud")
    tree2d = cKDTree(pts[:, :2])
    tree3d = cKDTree(pts) if min_support > 0 else None
    seeds = []
    seen = set()
    for pose in chunk_poses:
        cand = np.asarray(tree2d.query_ball_point(pose.u[:2], r_seed), dtype=np.int64)
        if cand.size == 0:
            continue
        cand = cand[np.lexsort((cand, pts[cand, 2]))][:max_candidates]
        chosen = None
        if tree3d is None:
            chosen = int(cand[0])
        else:
            support = tree3d.query_ball_point(pts[cand], support_radius, return_length=True)
            ok = np.flatnonzero(support - 1 >= min_support)
            if ok.size:
                chosen = int(cand[ok[0]])
        if chosen is not None and chosen not in seen:
            seen.add(chosen)
            seeds.append(chosen)
    if not seeds:
        raise NoGroundSeedsError("no ground seeds")
    return np.array(seeds, dtype=np.int64)


def estimate_normals(cloud: PointCloud, k_nn: int, tree=None, block: int = 100_000,
                     return_neighbors: bool = False):
    """PCA normals over each point's k nearest neighbours, oriented to +z.

    Degenerate neighbourhoods (rank < 2) get NaN normals.
    """
    pts = cloud.points
    n = len(pts)
    k = min(int(k_nn), n)
    normals = np.full((n, 3), np.nan)
    neighbors = np.empty((n, k), dtype=np.int32) if return_neighbors else None
    if n == 0:
        return (normals, neighbors) if return_neighbors else normals
    tree = tree if tree is not None else cKDTree(pts)
    for a in range(0, n, block):
        b = min(n, a + block)
        _, idx = tree.query(pts[a:b], k=k)
        idx = idx.reshape(b - a, k)
        if return_neighbors:
            neighbors[a:b] = idx
        nb = pts[idx]
        nb = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb) / k
        w, v = np.linalg.eigh(cov)
        nrm = v[:, :, 0]
        flip = nrm[:, 2] < 0
        nrm[flip] *= -1
        bad = ~(w[:, 1] > 1e-10 * np.maximum(w[:, 2], 1e-300))
        nrm[bad] = np.nan
        normals[a:b] = nrm
    return (normals, neighbors) if return_neighbors else normals


def grow_ground(cloud: PointCloud, seeds, normals, params: GroundParams, neighbors=None) -> np.ndarray:
    """Region-grow ground flags from ``seeds`` over the k-NN graph."""
    pts = np.ascontiguousarray(cloud.points, dtype=np.float64)
    if neighbors is None:
        k = min(params.k_nn, len(pts))
        _, neighbors = cKDTree(pts).query(pts, k=k)
        neighbors = neighbors.reshape(len(pts), k)
    cos_alpha = math.cos(math.radians(params.alpha))
    return _kernels.grow_region(pts, np.ascontiguousarray(normals, dtype=np.float64),
                                np.ascontiguousarray(neighbors), np.asarray(seeds, dtype=np.int64),
                                cos_alpha, float(params.delta))


def segment_ground(frames: Sequence[PointCloud], poses: Sequence[Pose],
                   params: GroundParams = GroundParams()) -> List[np.ndarray]:
    """Ground flags for every point of every frame of one chunk.

    Frames are in their sensor frame; ``poses`` map them to the world.
    """
    if len(frames) == 0:
        return []
    sizes = [len(f) for f in frames]
    if sum(sizes) == 0:
        return [np.zeros(0, dtype=bool) for _ in frames]
    merged = PointCloud(np.concatenate([p.apply(f.points) for f, p in zip(frames, poses)]), frame_id="world")
    ds = voxel_downsample(merged, params.s)
    cloud = ds.cloud
    normals, neighbors = estimate_normals(cloud, params.k_nn, return_neighbors=True)
    try:
        seeds = find_seeds(cloud, poses, params.r_seed, min_support=params.k_nn // 2,
                           support_radius=params.seed_support_radius)
    except NoGroundSeedsError:
        log.warning("no ground seeds in chunk of %d frames; labelling all points non-ground", len(frames))
        return [np.zeros(n, dtype=bool) for n in sizes]
    flags = grow_ground(cloud, seeds, normals, params, neighbors)
    full = ds.reproject(flags)
    return np.split(full, np.cumsum(sizes)[:-1])


def segment_sequence(load_frame: Callable[[int], PointCloud], traj: Trajectory,
                     params: GroundParams = GroundParams(), workers: int = 1) -> List[np.ndarray]:
    """Chunk the trajectory and segment every chunk independently."""
    out: List[np.ndarray] = [None] * len(traj)  # type: ignore[list-item]

    def one(chunk):
        flags = segment_ground([load_frame(i) for i in chunk], [traj[i] for i in chunk], params)
        log.info("ground: frames %d-%d, %d/%d ground points", chunk.start, chunk.stop - 1,
                 sum(int(f.sum()) for f in flags), sum(len(f) for f in flags))
        return chunk, flags

    chunks = chunk_trajectory(traj, params.l)
    if workers <= 1 or len(chunks) == 1:
        results = [one(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one, chunks))
    for chunk, flags in results:
        for i, f in zip(chunk, flags):
            out[i] = f
    return out
