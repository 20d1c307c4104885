"""Geometric primitives: boxes, projection, hulls, oriented rectangles and IoU.

Conventions
-----------
* The point-cloud frame is gravity aligned with ``z`` pointing up. Boxes only
  rotate about ``z``; yaw is measured counter-clockwise from ``+x`` to the
  box's length axis.
* ``box_corners`` returns the bottom face counter-clockwise (seen from above)
  followed by the top face in the same order, starting at the corner with
  local offset ``(+l/2, -w/2)``.
* BEV edge indexing used by :func:`point_edge_distances_bev`: edge 1 is
  ``u = +l/2``, edge 2 is ``u = -l/2``, edge 3 is ``v = +w/2``, edge 4 is
  ``v = -w/2`` where ``(u, v)`` are box-frame BEV coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, EmptyInputError, NonPositiveDepthError

MIN_DEPTH = 1e-6

# local corner offsets in units of (l, w, h)
_CORNER_SIGNS = np.array(
    [
        [0.5, -0.5, -0.5],
        [0.5, 0.5, -0.5],
        [-0.5, 0.5, -0.5],
        [-0.5, -0.5, -0.5],
        [0.5, -0.5, 0.5],
        [0.5, 0.5, 0.5],
        [-0.5, 0.5, 0.5],
        [-0.5, -0.5, 0.5],
    ]
)


def wrap_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi)."""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _wrap_half_pi(angle: float) -> float:
    """Wrap an angle into [-pi/2, pi/2)."""
    return (angle + math.pi / 2.0) % math.pi - math.pi / 2.0


@dataclass(frozen=True)
class Box3D:
    """Gravity-aligned oriented box with yaw stored as a (sin, cos) pair.

    The pair is renormalized on construction, so every box produced by an
    update step satisfies ``sin^2 + cos^2 = 1``.
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw_sin: float = 0.0
    yaw_cos: float = 1.0

    def __post_init__(self):
        values = (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw_sin, self.yaw_cos)
        if not all(math.isfinite(float(v)) for v in values):
            raise ValueError(f"non-finite box parameter in {values}")
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got l={self.l}, w={self.w}, h={self.h}")
        norm = math.hypot(self.yaw_sin, self.yaw_cos)
        if norm == 0.0:
            raise ValueError("yaw (sin, cos) pair is zero")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw_sin", float(self.yaw_sin) / norm)
        object.__setattr__(self, "yaw_cos", float(self.yaw_cos) / norm)

    @classmethod
    def from_yaw(cls, cx, cy, cz, l, w, h, yaw=0.0) -> "Box3D":
        return cls(cx, cy, cz, l, w, h, math.sin(yaw), math.cos(yaw))

    @classmethod
    def from_vector(cls, vec) -> "Box3D":
        """Build from ``(x, y, z, l, w, h, yaw)``."""
        x, y, z, l, w, h, yaw = (float(v) for v in vec)
        return cls.from_yaw(x, y, z, l, w, h, yaw)

    @property
    def yaw(self) -> float:
        return math.atan2(self.yaw_sin, self.yaw_cos)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - self.h / 2.0

    @property
    def z_max(self) -> float:
        return self.cz + self.h / 2.0

    def to_vector(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    def bev_corners(self) -> np.ndarray:
        """The four BEV corners, counter-clockwise, shape (4, 2)."""
        return box_corners(self)[:4, :2]


@dataclass(frozen=True)
class Rect2D:
    """Axis-aligned image rectangle in pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"inverted rectangle {self}")

    @classmethod
    def from_array(cls, arr) -> "Rect2D":
        return cls(*(float(v) for v in arr))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, pixels, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of pixels inside the closed rectangle."""
        px = np.atleast_2d(np.asarray(pixels, dtype=float))
        return (
            (px[:, 0] >= self.x_min - tol)
            & (px[:, 0] <= self.x_max + tol)
            & (px[:, 1] >= self.y_min - tol)
            & (px[:, 1] <= self.y_max + tol)
        )

    def contains_rect(self, other: "Rect2D", tol: float = 0.0) -> bool:
        return (
            other.x_min >= self.x_min - tol
            and other.y_min >= self.y_min - tol
            and other.x_max <= self.x_max + tol
            and other.y_max <= self.y_max + tol
        )

    def union(self, other: "Rect2D") -> "Rect2D":
        return Rect2D(
            min(self.x_min, other.x_min),
            min(self.y_min, other.y_min),
            max(self.x_max, other.x_max),
            max(self.y_max, other.y_max),
        )

    def clamp(self, width: float, height: float) -> "Rect2D":
        """Clamp to the image ``[0, width] x [0, height]``."""

        def c(v, hi):
            return min(max(v, 0.0), hi)

        return Rect2D(c(self.x_min, width), c(self.y_min, height), c(self.x_max, width), c(self.y_max, height))


@dataclass(frozen=True)
class CameraCalibration:
    """Projection from the point-cloud frame to pixels.

    ``matrix = intrinsics @ cloud_to_cam``. For KITTI, ``intrinsics`` is P2 and
    ``cloud_to_cam`` is ``R0_rect @ Tr_velo_to_cam`` padded to 4x4; for a single
    synthetic matrix ``cloud_to_cam`` is the identity.
    """

    intrinsics: np.ndarray
    cloud_to_cam: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=float).reshape(3, 4)
        T = np.asarray(self.cloud_to_cam, dtype=float).reshape(4, 4)
        M = K @ T
        if not np.all(np.isfinite(M)) or np.linalg.matrix_rank(M) < 3:
            raise ValueError("projection matrix must be finite with full row rank")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "cloud_to_cam", T)
        object.__setattr__(self, "_matrix", M)
        object.__setattr__(self, "_depth_scale", float(np.linalg.norm(M[2, :3])))

    @classmethod
    def from_matrix(cls, matrix) -> "CameraCalibration":
        return cls(np.asarray(matrix, dtype=float).reshape(3, 4))

    @classmethod
    def pinhole(cls, focal, cx, cy, cloud_to_cam=None) -> "CameraCalibration":
        K = np.array([[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(K, np.eye(4) if cloud_to_cam is None else cloud_to_cam)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def homogeneous(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self._matrix[:, :3].T + self._matrix[:, 3]

    def depth(self, points) -> np.ndarray:
        """Signed camera-frame depth of each point."""
        return self.homogeneous(points)[:, 2] / self._depth_scale

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixels and depths without the depth check (pixels of bad points are garbage)."""
        q = self.homogeneous(points)
        depth = q[:, 2] / self._depth_scale
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = q[:, :2] / q[:, 2:3]
        return pix, depth

    def cloud_to_camera(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.cloud_to_cam[:3, :3].T + self.cloud_to_cam[:3, 3]

    def camera_to_cloud(self, points) -> np.ndarray:
        inv = np.linalg.inv(self.cloud_to_cam)
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ inv[:3, :3].T + inv[:3, 3]


@dataclass(frozen=True)
class ConvexPolygon2D:
    """Strictly convex polygon with counter-clockwise vertices, shape (M, 2)."""

    vertices: np.ndarray

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        return polygon_area(self.vertices)

    @property
    def perimeter(self) -> float:
        v = self.vertices
        return float(np.sum(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)))


def polygon_area(vertices) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _rotz(yaw_sin: float, yaw_cos: float) -> np.ndarray:
    return np.array([[yaw_cos, -yaw_sin, 0.0], [yaw_sin, yaw_cos, 0.0], [0.0, 0.0, 1.0]])


def box_corners(box: Box3D) -> np.ndarray:
    """The 8 corners of ``box``, shape (8, 3), in the documented order."""
    local = _CORNER_SIGNS * np.array([box.l, box.w, box.h])
    return local @ _rotz(box.yaw_sin, box.yaw_cos).T + box.center


def project_points(points, calib: CameraCalibration) -> np.ndarray:
    """Project cloud-frame points to pixels, shape (N, 2).

    Raises NonPositiveDepthError if any point has depth <= 1e-6 m.
    """
    pix, depth = calib.project(points)
    if np.any(depth <= MIN_DEPTH):
        bad = int(np.argmin(depth))
        raise NonPositiveDepthError(f"point {bad} has camera depth {depth[bad]:.6g} m")
    return pix


def min_bounding_rect(pixels) -> Rect2D:
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(px) == 0:
        raise EmptyInputError("min_bounding_rect needs at least one pixel")
    lo = px.min(axis=0)
    hi = px.max(axis=0)
    return Rect2D(lo[0], lo[1], hi[0], hi[1])


def to_box_frame_bev(points, box: Box3D) -> np.ndarray:
    """BEV offsets from the box center rotated by -yaw, shape (N, 2).

    Column 0 (u) runs along the length axis, column 1 (v) along the width axis.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    s, c = box.yaw_sin, box.yaw_cos
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=1)


def from_box_frame_bev(uv, box: Box3D) -> np.ndarray:
    """Inverse of :func:`to_box_frame_bev` (returns world BEV xy)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    s, c = box.yaw_sin, box.yaw_cos
    return np.stack([c * uv[:, 0] - s * uv[:, 1] + box.cx, s * uv[:, 0] + c * uv[:, 1] + box.cy], axis=1)


def point_edge_distances_bev(points, box: Box3D) -> np.ndarray:
    """Unsigned distances to the four BEV edge lines, shape (N, 4).

    Columns are ``(|u - l/2|, |u + l/2|, |v - w/2|, |v + w/2|)``.
    """
    uv = to_box_frame_bev(points, box)
    u, v = uv[:, 0], uv[:, 1]
    hl, hw = box.l / 2.0, box.w / 2.0
    return np.stack([np.abs(u - hl), np.abs(u + hl), np.abs(v - hw), np.abs(v + hw)], axis=1)


def box_contains_points(box: Box3D, points, tol: float = 1e-6) -> np.ndarray:
    """Mask of points inside the closed box, with slack ``tol`` in metres."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    uv = to_box_frame_bev(pts, box)
    return (
        (np.abs(uv[:, 0]) <= box.l / 2.0 + tol)
        & (np.abs(uv[:, 1]) <= box.w / 2.0 + tol)
        & (pts[:, 2] >= box.z_min - tol)
        & (pts[:, 2] <= box.z_max + tol)
    )


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull_2d(points) -> ConvexPolygon2D:
    """Counter-clockwise convex hull by Andrew's monotone chain.

    Collinear boundary points are dropped. Raises DegenerateInputError when the
    input has fewer than 3 distinct points or is collinear.
    """
    pts = np.unique(np.asarray(points, dtype=float).reshape(-1, 2), axis=0)
    if len(pts) < 3:
        raise DegenerateInputError(f"convex hull needs 3 distinct points, got {len(pts)}")
    # np.unique sorts lexicographically by (x, y), which is what the chain needs
    seq = [tuple(p) for p in pts]

    lower: list[tuple[float, float]] = []
    for p in seq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(seq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)

    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateInputError("all points are collinear")
    return ConvexPolygon2D(np.array(hull))


def min_perimeter_rect_bev(hull: ConvexPolygon2D) -> tuple[np.ndarray, float, float, float]:
    """Minimum-perimeter enclosing rectangle with one side flush to a hull edge.

    Returns ``(center_xy, l, w, yaw)`` with ``l >= w`` and yaw (direction of
    the ``l`` side) in [-pi/2, pi/2). Perimeter ties within 1e-12 go to the
    smaller ``|yaw|``.
    """
    v = np.asarray(hull.vertices, dtype=float)
    if len(v) < 3:
        raise DegenerateInputError("hull needs at least 3 vertices")
    edges = np.roll(v, -1, axis=0) - v
    theta = np.arctan2(edges[:, 1], edges[:, 0])
    c, s = np.cos(theta), np.sin(theta)
    # project every vertex onto every edge direction and its normal
    pu = v[:, 0][None, :] * c[:, None] + v[:, 1][None, :] * s[:, None]
    pv = -v[:, 0][None, :] * s[:, None] + v[:, 1][None, :] * c[:, None]
    umin, umax = pu.min(axis=1), pu.max(axis=1)
    vmin, vmax = pv.min(axis=1), pv.max(axis=1)
    du, dv = umax - umin, vmax - vmin
    perim = 2.0 * (du + dv)

    best_p = float(perim.min())
    tol = 1e-12 * max(1.0, best_p)
    best = None
    for i in np.flatnonzero(perim <= best_p + tol):
        if du[i] >= dv[i]:
            l, w, yaw = du[i], dv[i], theta[i]
        else:
            l, w, yaw = dv[i], du[i], theta[i] + math.pi / 2.0
        yaw = _wrap_half_pi(float(yaw))
        key = (abs(yaw), float(perim[i]), int(i))
        if best is None or key < best[0]:
            uc = (umin[i] + umax[i]) / 2.0
            vc = (vmin[i] + vmax[i]) / 2.0
            center = np.array([c[i] * uc - s[i] * vc, s[i] * uc + c[i] * vc])
            best = (key, center, float(l), float(w), yaw)
    _, center, l, w, yaw = best
    return center, l, w, yaw


def clip_convex_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman: clip polygon ``subject`` by convex CCW polygon ``clip``."""
    output = [tuple(p) for p in np.asarray(subject, dtype=float)]
    cv = np.asarray(clip, dtype=float)
    n = len(cv)
    for i in range(n):
        if not output:
            break
        a = cv[i]
        b = cv[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=float).reshape(-1, 2)


def rotated_rect_intersection_area(a: Box3D, b: Box3D) -> float:
    """Area (m^2) of the intersection of the two BEV rectangles."""
    # cheap rejection on circumscribed circles
    ra = 0.5 * math.hypot(a.l, a.w)
    rb = 0.5 * math.hypot(b.l, b.w)
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    poly = clip_convex_polygon(a.bev_corners(), b.bev_corners())
    if len(poly) < 3:
        return 0.0
    return max(0.0, polygon_area(poly))


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = rotated_rect_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def box3d_iou(a: Box3D, b: Box3D) -> float:
    dz = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if dz <= 0:
        return 0.0
    inter = rotated_rect_intersection_area(a, b) * dz
    union = a.volume + b.volume - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0


def canonical_box(box: Box3D) -> Box3D:
    """Equivalent box with ``l >= w`` and yaw in [-pi/2, pi/2)."""
    l, w, yaw = box.l, box.w, box.yaw
    if w > l:
        l, w, yaw = w, l, yaw + math.pi / 2.0
    return Box3D.from_yaw(box.cx, box.cy, box.cz, l, w, box.h, _wrap_half_pi(yaw))


def boxes_equivalent(a: Box3D, b: Box3D, tol: float = 1e-6) -> bool:
    """Equality up to the yaw-pi / l-w swap symmetry of a rectangle."""
    ca, cb = canonical_box(a), canonical_box(b)
    lin = np.array([ca.cx - cb.cx, ca.cy - cb.cy, ca.cz - cb.cz, ca.l - cb.l, ca.w - cb.w, ca.h - cb.h])
    if np.any(np.abs(lin) > tol):
        return False
    dyaw = abs(_wrap_half_pi(ca.yaw - cb.yaw))
    # a square's yaw is only defined modulo pi/2
    if abs(ca.l - ca.w) <= tol:
        dyaw = min(dyaw, abs(abs(dyaw) - math.pi / 2.0))
    return dyaw <= tol
