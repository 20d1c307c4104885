"""Independent reference implementations used as test oracles.

Nothing here imports the package's geometry or loss code; each function is
a direct (usually slow) restatement of the quantity being checked.
"""

from __future__ import annotations

import math

import numpy as np


def homogeneous_corners(center, dims, yaw):
    """Corners through an explicit 4x4 rigid transform of the unit-cube corners."""
    l, w, h = dims
    T = np.eye(4)
    c, s = math.cos(yaw), math.sin(yaw)
    T[:3, :3] = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.diag([l, w, h])
    T[:3, 3] = center
    signs = np.array(
        [[1, -1, -1], [1, 1, -1], [-1, 1, -1], [-1, -1, -1], [1, -1, 1], [1, 1, 1], [-1, 1, 1], [-1, -1, 1]],
        dtype=float,
    ) / 2.0
    hom = np.hstack([signs, np.ones((8, 1))])
    return (hom @ T.T)[:, :3]


def project_matrix(P, points):
    """Pixels by an explicit homogeneous matrix product."""
    pts = np.atleast_2d(points)
    q = np.hstack([pts, np.ones((len(pts), 1))]) @ np.asarray(P).T
    return q[:, :2] / q[:, 2:3]


def brute_force_hull_vertices(points):
    """Hull vertices as points that are an endpoint of some edge with all others strictly left or on it."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    extreme = np.zeros(n, dtype=bool)
    for i in range(n):
        d = pts - pts[i]
        # cross[j, k] = d_j x d_k; edge i->j is a hull edge if no k lies strictly right of it
        cross = d[:, None, 0] * d[None, :, 1] - d[:, None, 1] * d[None, :, 0]
        ok = np.all(cross >= -1e-12, axis=1)
        ok[i] = False
        if np.any(ok):
            extreme[i] = True
            extreme[np.flatnonzero(ok)] = True
    return pts[extreme]


def sweep_min_perimeter(points, step_deg=0.1):
    """Smallest enclosing-rectangle perimeter over orientations 0, step, ..., 90 deg."""
    pts = np.asarray(points, dtype=float)
    ang = np.radians(np.arange(0.0, 90.0 + step_deg / 2, step_deg))
    c, s = np.cos(ang), np.sin(ang)
    u = pts[:, 0][None, :] * c[:, None] + pts[:, 1][None, :] * s[:, None]
    v = -pts[:, 0][None, :] * s[:, None] + pts[:, 1][None, :] * c[:, None]
    per = 2.0 * ((u.max(1) - u.min(1)) + (v.max(1) - v.min(1)))
    return float(per.min())


def _bev_inside(xy, center, l, w, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = xy[:, 0] - center[0], xy[:, 1] - center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)


def voxel_iou(a, b, res=0.01):
    """IoU of two gravity-aligned boxes ``(cx, cy, cz, l, w, h, yaw)`` on a voxel grid.

    A voxel belongs to a box when its center does. Because the boxes are
    vertical prisms the 3D membership factorises into a BEV cell test and a
    z-cell test, so counts are products of a 2D grid count and a 1D count.
    """
    boxes = [np.asarray(a, float), np.asarray(b, float)]
    r = [0.5 * math.hypot(x[3], x[4]) for x in boxes]
    lo = np.min([x[:2] - ri for x, ri in zip(boxes, r)], axis=0)
    hi = np.max([x[:2] + ri for x, ri in zip(boxes, r)], axis=0)
    gx = np.arange(lo[0] + res / 2, hi[0], res)
    gy = np.arange(lo[1] + res / 2, hi[1], res)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    xy = np.stack([X.ravel(), Y.ravel()], axis=1)
    ins = [_bev_inside(xy, x[:2], x[3], x[4], x[6]) for x in boxes]
    zlo = min(x[2] - x[5] / 2 for x in boxes)
    zhi = max(x[2] + x[5] / 2 for x in boxes)
    gz = np.arange(zlo + res / 2, zhi, res)
    zins = [(gz >= x[2] - x[5] / 2) & (gz <= x[2] + x[5] / 2) for x in boxes]
    na = ins[0].sum() * zins[0].sum()
    nb = ins[1].sum() * zins[1].sum()
    ni = (ins[0] & ins[1]).sum() * (zins[0] & zins[1]).sum()
    return ni / (na + nb - ni)


def monte_carlo_rotated_square_overlap(n, seed=0, chunk=10**6):
    """Area of unit square intersect the same square rotated 45 deg, by uniform sampling.

    Returns ``(estimate, standard_error)``; samples in the unit square.
    """
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    c = s = math.sqrt(0.5)
    while done < n:
        m = min(chunk, n - done)
        p = rng.uniform(-0.5, 0.5, size=(m, 2))
        u = c * p[:, 0] + s * p[:, 1]
        v = -s * p[:, 0] + c * p[:, 1]
        hits += int(np.count_nonzero((np.abs(u) <= 0.5) & (np.abs(v) <= 0.5)))
        done += m
    p_hat = hits / n
    return p_hat, math.sqrt(p_hat * (1 - p_hat) / n)


def box_frame(points, center, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.atleast_2d(points)[:, :2] - np.asarray(center)[:2]
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def edge_line_distances(points, center, l, w, yaw):
    """Distances to the four BEV edge lines via point-to-line formulas in world coordinates."""
    c, s = math.cos(yaw), math.sin(yaw)
    ax = np.array([c, s])
    ay = np.array([-s, c])
    cx = np.asarray(center)[:2]
    p = np.atleast_2d(points)[:, :2]
    out = []
    for anchor, direction in (
        (cx + ax * l / 2, ay),
        (cx - ax * l / 2, ay),
        (cx + ay * w / 2, ax),
        (cx - ay * w / 2, ax),
    ):
        d = p - anchor
        out.append(np.abs(d[:, 0] * direction[1] - d[:, 1] * direction[0]))
    return np.stack(out, axis=1)


def union_find_labels(points, radius):
    """Component id per point over the graph linking pairs closer than ``radius``."""
    pts = np.asarray(points, float)
    n = len(pts)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    for i, j in zip(*np.nonzero(np.triu(d < radius, 1))):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return np.array([find(i) for i in range(n)])


def central_difference(f, x, steps):
    x = np.asarray(x, float)
    g = np.zeros(len(x))
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = steps[j]
        g[j] = (f(x + e) - f(x - e)) / (2 * steps[j])
    return g
