import logging
import math
from collections import deque
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docdepth import ground, scenes, synth
from docdepth.core import Label, PointCloud, Pose, Trajectory
from docdepth.errors import NoGroundSeedsError
from docdepth.ground import GroundParams


def _line_traj(xs):
    return Trajectory([Pose.from_rt(np.eye(3), [x, 0.0, 0.0], float(i)) for i, x in enumerate(xs)])


@lru_cache(maxsize=None)
def _patch(kind, n_frames):
    sim = synth.Simulator(synth.script_from_dict(scenes.patch_scene(kind, n_frames=n_frames)))
    frames = [sim.frame(i) for i in range(len(sim.script.frame_times))]
    clouds = [f[0] for f in frames]
    poses = [f[2] for f in frames]
    flags = np.concatenate(ground.segment_ground(clouds, poses))
    ids = np.concatenate([f[1] for f in frames])
    world = np.concatenate([p.apply(c.points) for c, p in zip(clouds, poses)])
    return flags, ids, world


# -- chunking ------------------------------------------------------------------

def test_chunks_of_long_trajectory():
    traj = _line_traj(np.linspace(0, 1200, 1201))
    chunks = ground.chunk_trajectory(traj, 500.0)
    assert len(chunks) == 3
    for c in chunks:
        assert traj.arclen[c.stop - 1] - traj.arclen[c.start] <= 500.0


def test_stationary_trajectory_single_chunk():
    assert len(ground.chunk_trajectory(_line_traj(np.zeros(30)), 500.0)) == 1


@given(st.lists(st.floats(0.0, 5.0), min_size=1, max_size=80), st.floats(1.0, 40.0))
def test_chunks_partition_random_walk(steps, l):
    rng = np.random.default_rng(len(steps))
    ang = rng.uniform(0, 2 * np.pi, len(steps))
    xy = np.cumsum(np.c_[np.cos(ang), np.sin(ang)] * np.asarray(steps)[:, None], axis=0)
    traj = Trajectory([Pose.from_rt(np.eye(3), [x, y, 0.0], float(i)) for i, (x, y) in enumerate(xy)])
    chunks = ground.chunk_trajectory(traj, l)
    covered = [i for c in chunks for i in c]
    assert covered == list(range(len(traj)))
    # arc per chunk recomputed from the poses
    for c in chunks:
        seg = np.linalg.norm(np.diff(xy[c.start:c.stop], axis=0), axis=1).sum()
        assert seg <= l + 1e-9 or len(c) == 1
    # a chunk is only closed when adding the next pose would exceed l
    for a, b in zip(chunks, chunks[1:]):
        seg = np.linalg.norm(np.diff(xy[a.start:b.start + 1], axis=0), axis=1).sum()
        assert seg > l - 1e-9


# -- seeds --------------------------------------------------------------------

def _grid(z=0.0, half=5.0, step=0.1):
    g = np.arange(-half, half + 1e-9, step)
    x, y = np.meshgrid(g, g)
    return np.c_[x.ravel(), y.ravel(), np.full(x.size, z)]


def test_seeds_on_flat_plane():
    pts = _grid()
    poses = [Pose.from_rt(np.eye(3), [x, 0, 1.8]) for x in (-3, 0, 3)]
    seeds = ground.find_seeds(PointCloud(pts), poses, 2.0)
    assert len(seeds) >= 1 and np.all(pts[seeds, 2] == 0.0)


def test_seed_ignores_trail_above_ground():
    pts = np.r_[_grid(), [[0.05, 0.0, 0.5]]]
    seeds = ground.find_seeds(PointCloud(pts), [Pose.from_rt(np.eye(3), [0, 0, 1.8])], 2.0)
    assert len(pts) - 1 not in seeds.tolist()


def test_isolated_low_outlier_is_not_a_seed():
    pts = np.r_[_grid(), [[0.0, 0.0, -3.0]]]
    seeds = ground.find_seeds(PointCloud(pts), [Pose.from_rt(np.eye(3), [0, 0, 1.8])], 2.0,
                              min_support=15, support_radius=0.5)
    assert pts[seeds[0], 2] == 0.0


def test_no_seeds_raises():
    with pytest.raises(NoGroundSeedsError, match="no ground seeds"):
        ground.find_seeds(PointCloud(_grid()), [Pose.from_rt(np.eye(3), [100, 0, 1.8])], 2.0)


def test_seeds_are_ground_in_simulated_scene():
    sim = synth.Simulator(synth.script_from_dict(scenes.street_scene(n_frames=10)))
    frames = [sim.frame(i) for i in range(10)]
    world = np.concatenate([p.apply(c.points) for c, _, p in frames])
    truth = np.concatenate([c.labels for c, _, _ in frames])
    seeds = ground.find_seeds(PointCloud(world), [p for _, _, p in frames], 2.0)
    assert np.all(truth[seeds] == Label.GROUND)


# -- normals ------------------------------------------------------------------

def test_normals_of_horizontal_plane(rng):
    pts = np.c_[rng.uniform(-1, 1, (500, 2)), np.zeros(500)]
    n = ground.estimate_normals(PointCloud(pts), 30)
    assert np.allclose(n, [0, 0, 1])


def test_normals_of_wall(rng):
    pts = np.c_[np.zeros(500), rng.uniform(-1, 1, (500, 2))]
    n = ground.estimate_normals(PointCloud(pts), 30)
    assert np.abs(n[:, 2]).max() < 1e-9 and np.allclose(np.abs(n[:, 0]), 1)


def test_normals_of_sphere():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(10_000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    n = ground.estimate_normals(PointCloud(p), 30)
    ang = np.degrees(np.arccos(np.clip(np.abs(np.sum(n * p, axis=1)), 0, 1)))
    assert ang.max() < 3.0
    assert np.all(n[:, 2] >= 0)


def test_degenerate_neighbourhood_normal_invalid():
    line = np.outer(np.linspace(0, 1, 40), [1.0, 0.5, 0.0])
    assert np.all(np.isnan(ground.estimate_normals(PointCloud(line), 10)))


# -- growing ------------------------------------------------------------------

def _bfs_oracle(pts, normals, neighbors, seeds, alpha, delta):
    cos_a = math.cos(math.radians(alpha))
    flags = np.zeros(len(pts), bool)
    q = deque()
    for s in seeds:
        if not flags[s] and normals[s, 2] >= cos_a:
            flags[s] = True
            q.append(s)
    while q:
        i = q.popleft()
        for j in neighbors[i]:
            if flags[j] or not normals[j, 2] >= cos_a:
                continue
            if abs(np.dot(pts[j] - pts[i], normals[i])) <= delta:
                flags[j] = True
                q.append(j)
    return flags


def _bumpy(seed, n=1500):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-5, 5, (n, 2))
    z = 0.3 * np.sin(xy[:, 0]) * np.cos(0.7 * xy[:, 1]) + rng.normal(scale=0.01, size=n)
    z[xy[:, 0] > 3] += 1.0          # a cliff the growth should not cross
    return np.c_[xy, z]


@pytest.mark.parametrize("seed", range(5))
def test_grow_matches_bfs_oracle(seed):
    pts = _bumpy(seed)
    p = GroundParams(k_nn=12, alpha=20.0, delta=0.05)
    normals, nb = ground.estimate_normals(PointCloud(pts), p.k_nn, return_neighbors=True)
    seeds = np.array([int(np.argmin(np.linalg.norm(pts[:, :2], axis=1)))])
    got = ground.grow_ground(PointCloud(pts), seeds, normals, p, nb)
    assert np.array_equal(got, _bfs_oracle(pts, normals, nb, seeds, p.alpha, p.delta))
    assert got.sum() > 10


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0.005, 0.1), st.floats(0.0, 0.1), st.floats(5.0, 40.0))
def test_grow_invariants(seed, delta, extra, alpha):
    pts = _bumpy(seed, 600)
    normals, nb = ground.estimate_normals(PointCloud(pts), 10, return_neighbors=True)
    seeds = np.array([0, 1, 2])
    small = ground.grow_ground(PointCloud(pts), seeds, normals, GroundParams(k_nn=10, alpha=alpha, delta=delta), nb)
    big = ground.grow_ground(PointCloud(pts), seeds, normals,
                             GroundParams(k_nn=10, alpha=alpha, delta=delta + extra), nb)
    assert np.all(big[small])                                            # monotone in delta
    assert np.all(normals[small, 2] >= math.cos(math.radians(alpha)))   # verticality filter
    # every ground point is reachable from a seed over admitted edges
    reach = np.zeros(len(pts), bool)
    stack = [s for s in seeds if small[s]]
    reach[stack] = True
    while stack:
        i = stack.pop()
        for j in nb[i]:
            if small[j] and not reach[j] and abs(np.dot(pts[j] - pts[i], normals[i])) <= delta:
                reach[j] = True
                stack.append(j)
    assert np.array_equal(reach, small)


def test_corner_wall_rejected():
    flags, ids, _ = _patch("corner", 20)
    assert flags[ids == 0].mean() > 0.99
    assert not flags[ids == 1].any()


def test_step_below_delta_both_levels_ground():
    flags, ids, _ = _patch("step", 20)
    assert flags[ids == 0].mean() > 0.999 and flags[ids == 1].mean() > 0.999


def test_ramp_joins_ground():
    flags, ids, world = _patch("ramp", 40)
    assert flags[ids == 0].mean() > 0.999
    # the well-sampled part of the ramp; beyond it the scan rings are too far
    # apart for a k-NN neighbourhood to bridge them
    near = (ids == 1) & (world[:, 0] < 18.0)
    assert near.sum() > 1000 and flags[near].mean() > 0.99


# -- whole chunks -------------------------------------------------------------

def test_empty_chunk():
    assert ground.segment_ground([], []) == []


def test_no_ground_near_trajectory(caplog):
    pts = _grid() + [50.0, 0, 0]
    frames = [PointCloud(pts)] * 2
    poses = [Pose.identity(), Pose.identity()]
    with caplog.at_level(logging.WARNING):
        out = ground.segment_ground(frames, poses)
    assert all(not f.any() for f in out)
    assert "no ground seeds" in caplog.text


def test_street_scene_ground_iou():
    sim = synth.Simulator(synth.script_from_dict(scenes.street_scene(n_frames=60)))
    frames = [sim.frame(i) for i in range(60)]
    flags = ground.segment_ground([c for c, _, _ in frames], [p for _, _, p in frames])
    pred = np.concatenate(flags)
    truth = np.concatenate([c.labels for c, _, _ in frames]) == Label.GROUND
    assert (pred & truth).sum() / (pred | truth).sum() >= 0.98


def test_deterministic():
    a = _patch.__wrapped__("flat", 8)[0]
    b = _patch.__wrapped__("flat", 8)[0]
    assert np.array_equal(a, b)


def test_sequence_chunks_in_parallel_match_serial():
    sim = synth.Simulator(synth.script_from_dict(scenes.patch_scene("corner", n_frames=12)))
    traj = sim.trajectory()
    frames = [sim.frame(i)[0] for i in range(len(traj))]
    p = GroundParams(l=0.8)
    assert len(ground.chunk_trajectory(traj, p.l)) > 2
    a = ground.segment_sequence(lambda i: frames[i], traj, p)
    b = ground.segment_sequence(lambda i: frames[i], traj, p, workers=3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
