"""Numba kernels for the per-point inner loops.

Everything that touches millions of points per frame lives here: spherical
projection, range-image insertion, the free-space vote, ellipse splatting and
the ground region growing. The Python-facing wrappers live in the domain
modules.
"""
import math

import numpy as np
from numba import njit

VOTE_NONE = 0
VOTE_STATIC = 1
VOTE_DYNAMIC = 2


@njit(cache=True, nogil=True)
def project_one(x, y, z, dphi, dtheta, rows, cols):
    rho = math.sqrt(x * x + y * y + z * z)
    c = z / rho
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    phi = abs(math.acos(c))
    theta = -math.atan2(y, x)
    r = int(math.floor(phi / dphi))
    if r < 0:
        r = 0
    elif r > rows - 1:
        r = rows - 1
    col = int(math.floor((theta + math.pi) / dtheta)) % cols
    return r, col, rho


@njit(cache=True, nogil=True)
def project_many(points, dphi, dtheta, rows, cols):
    n = points.shape[0]
    out_r = np.empty(n, dtype=np.int64)
    out_c = np.empty(n, dtype=np.int64)
    out_rho = np.empty(n, dtype=np.float64)
    for k in range(n):
        r, c, rho = project_one(points[k, 0], points[k, 1], points[k, 2], dphi, dtheta, rows, cols)
        out_r[k] = r
        out_c[k] = c
        out_rho[k] = rho
    return out_r, out_c, out_rho


@njit(cache=True, nogil=True)
def fill_range_image(points, ground, dphi, dtheta, rng, gnd):
    # min range per pixel; exact ties resolve toward the ground flag so the
    # result does not depend on insertion order
    rows, cols = rng.shape
    for k in range(points.shape[0]):
        x = points[k, 0]
        y = points[k, 1]
        z = points[k, 2]
        if x == 0.0 and y == 0.0 and z == 0.0:
            continue
        r, c, rho = project_one(x, y, z, dphi, dtheta, rows, cols)
        cur = rng[r, c]
        v = np.float32(rho)
        if v < cur or (v == cur and ground[k] and not gnd[r, c]):
            rng[r, c] = v
            gnd[r, c] = ground[k]


@njit(cache=True, nogil=True)
def vote_one(r_i, c_i, rho, rng, gnd, tau, w):
    rows, cols = rng.shape
    if r_i < 0 or r_i >= rows:
        return VOTE_NONE
    c_i = c_i % cols
    if not math.isfinite(rng[r_i, c_i]):
        return VOTE_NONE
    is_ground_pixel = False
    if gnd[r_i, c_i]:
        tau = 0.0
        is_ground_pixel = True
    vote = VOTE_NONE
    h = w // 2
    for r in range(r_i - h, r_i + h + 1):
        if r < 0 or r >= rows:
            continue
        for dc in range(-h, h + 1):
            val = rng[r, (c_i + dc) % cols]
            if not math.isfinite(val):
                continue
            if abs(rho - val) < tau:
                return VOTE_STATIC
            elif rho < val - tau:
                vote = VOTE_DYNAMIC
            elif not is_ground_pixel:
                return VOTE_NONE
    return vote


@njit(cache=True, nogil=True)
def accumulate_votes(points, rot, trans, rng, gnd, dphi, dtheta, tau, w, c_s, c_d):
    """Vote every point of a query frame against one key image.

    ``points`` are in the query sensor frame; ``rot``/``trans`` map them into
    the key frame sensor coordinates.
    """
    rows, cols = rng.shape
    for k in range(points.shape[0]):
        px = points[k, 0]
        py = points[k, 1]
        pz = points[k, 2]
        x = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
        y = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
        z = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
        if x == 0.0 and y == 0.0 and z == 0.0:
            continue
        r, c, rho = project_one(x, y, z, dphi, dtheta, rows, cols)
        v = vote_one(r, c, rho, rng, gnd, tau, w)
        if v == VOTE_STATIC:
            c_s[k] += 1
        elif v == VOTE_DYNAMIC:
            c_d[k] += 1


@njit(cache=True, nogil=True, inline="always")
def _zwrite(depth, dyn_mask, source, r, c, z, dyn, tag):
    cur = depth[r, c]
    if z < cur:
        take = True
    elif z == cur:
        # ties: dynamic first, then the smaller tag; keeps the result order independent
        if dyn != dyn_mask[r, c]:
            take = dyn
        else:
            take = tag < source[r, c]
    else:
        take = False
    if take:
        depth[r, c] = z
        dyn_mask[r, c] = dyn
        source[r, c] = tag


@njit(cache=True, nogil=True)
def splat_ellipses(us, vs, zs, half_w, half_h, dynamic, tags, depth, dyn_mask, source):
    """Z-buffer a batch of flat elliptical splats.

    Each splat covers the pixel centres inside its ellipse (and at least the
    pixel containing its centre). ``source`` receives the tag of the winning
    splat; ``-1`` marks untouched pixels.
    """
    height, width = depth.shape
    for k in range(us.shape[0]):
        u = us[k]
        v = vs[k]
        z = zs[k]
        a = half_w[k]
        b = half_h[k]
        dyn = dynamic[k]
        tag = tags[k]
        c0 = int(math.floor(u - a))
        c1 = int(math.ceil(u + a))
        r0 = int(math.floor(v - b))
        r1 = int(math.ceil(v + b))
        if c1 < 0 or r1 < 0 or c0 >= width or r0 >= height:
            continue
        c0 = max(c0, 0)
        r0 = max(r0, 0)
        c1 = min(c1, width - 1)
        r1 = min(r1, height - 1)
        for r in range(r0, r1 + 1):
            dv = (r - v) / b
            for c in range(c0, c1 + 1):
                du = (c - u) / a
                if du * du + dv * dv <= 1.0:
                    _zwrite(depth, dyn_mask, source, r, c, z, dyn, tag)
        # centre pixel is always drawn, even for sub-pixel ellipses
        rc = int(math.floor(v + 0.5))
        cc = int(math.floor(u + 0.5))
        if 0 <= rc < height and 0 <= cc < width:
            _zwrite(depth, dyn_mask, source, rc, cc, z, dyn, tag)


@njit(cache=True, nogil=True)
def grow_region(points, normals, neighbors, seeds, cos_alpha, delta):
    """Breadth-first ground growth over a k-NN graph.

    A point joins when its normal is within the verticality cone and it lies
    within ``delta`` of the frontier point's local plane.
    """
    n = points.shape[0]
    flags = np.zeros(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    head = 0
    tail = 0
    for s in seeds:
        if flags[s]:
            continue
        if not (normals[s, 2] >= cos_alpha):
            continue
        flags[s] = True
        queue[tail] = s
        tail += 1
    k = neighbors.shape[1]
    while head < tail:
        i = queue[head]
        head += 1
        nx = normals[i, 0]
        ny = normals[i, 1]
        nz = normals[i, 2]
        for m in range(k):
            j = neighbors[i, m]
            if j < 0 or flags[j]:
                continue
            if not (normals[j, 2] >= cos_alpha):
                continue
            dist = ((points[j, 0] - points[i, 0]) * nx
                    + (points[j, 1] - points[i, 1]) * ny
                    + (points[j, 2] - points[i, 2]) * nz)
            if abs(dist) <= delta:
                flags[j] = True
                queue[tail] = j
                tail += 1
    return flags


@njit(cache=True, nogil=True)
def cast_rays(origin, dirs, pl_c, pl_n, pl_u, pl_v, pl_h, bx_c, bx_r, bx_h, eps):
    """Nearest hit over planes then boxes; ids index planes first, then boxes."""
    n = dirs.shape[0]
    best = np.full(n, np.inf)
    ids = np.full(n, -1, dtype=np.int64)
    n_pl = pl_c.shape[0]
    for i in range(n):
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        for k in range(n_pl):
            den = dx * pl_n[k, 0] + dy * pl_n[k, 1] + dz * pl_n[k, 2]
            if abs(den) <= 1e-12:
                continue
            t = ((pl_c[k, 0] - origin[0]) * pl_n[k, 0] + (pl_c[k, 1] - origin[1]) * pl_n[k, 1]
                 + (pl_c[k, 2] - origin[2]) * pl_n[k, 2]) / den
            if not (t > eps) or not (t < best[i]):
                continue
            px = origin[0] + dx * t - pl_c[k, 0]
            py = origin[1] + dy * t - pl_c[k, 1]
            pz = origin[2] + dz * t - pl_c[k, 2]
            if abs(px * pl_u[k, 0] + py * pl_u[k, 1] + pz * pl_u[k, 2]) > pl_h[k, 0]:
                continue
            if abs(px * pl_v[k, 0] + py * pl_v[k, 1] + pz * pl_v[k, 2]) > pl_h[k, 1]:
                continue
            best[i] = t
            ids[i] = k
        for k in range(bx_c.shape[0]):
            tmin = -np.inf
            tmax = np.inf
            miss = False
            for a in range(3):
                # local coordinates: R^T (o - c), R^T d
                o = ((origin[0] - bx_c[k, 0]) * bx_r[k, 0, a] + (origin[1] - bx_c[k, 1]) * bx_r[k, 1, a]
                     + (origin[2] - bx_c[k, 2]) * bx_r[k, 2, a])
                d = dx * bx_r[k, 0, a] + dy * bx_r[k, 1, a] + dz * bx_r[k, 2, a]
                h = bx_h[k, a]
                if d == 0.0:
                    if abs(o) > h:
                        miss = True
                        break
                    continue
                t1 = (-h - o) / d
                t2 = (h - o) / d
                if t1 > t2:
                    t1, t2 = t2, t1
                if t1 > tmin:
                    tmin = t1
                if t2 < tmax:
                    tmax = t2
            if miss or tmax < tmin or not (tmin > eps):
                continue
            if tmin < best[i]:
                best[i] = tmin
                ids[i] = n_pl + k
    return best, ids
