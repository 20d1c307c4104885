"""Scene preprocessing: sampling, ground removal, frustum lifting, denoising
and the initial minimum-perimeter pseudo box."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInputError,
    EmptyCloudError,
    NoClusterAboveMinimumError,
    NonPositiveDepthError,
    TooFewPointsError,
)
from .geometry import (
    MIN_DEPTH,
    Box3D,
    CameraCalibration,
    Rect2D,
    box_corners,
    convex_hull_2d,
    min_bounding_rect,
    min_perimeter_rect_bev,
    project_points,
)

logger = logging.getLogger(__name__)

OUTDOOR = "outdoor"
INDOOR = "indoor"

# minimum box extent assigned to degenerate dimensions (metres)
MIN_BOX_DIM = 0.05
REFINE_ROUNDS = 10

# skip-report reason codes
EMPTY_FRUSTUM = "EmptyFrustum"
NO_CLUSTER = "NoClusterAboveMinimum"
TOO_FEW_POINTS = "TooFewPoints"
NON_POSITIVE_DEPTH = "NonPositiveDepth"


@dataclass
class Scene:
    """Point cloud, calibration, image size and the annotated 2D boxes.

    2D boxes are clamped to the image on construction; the unclamped input is
    kept in ``raw_boxes2d``.
    """

    cloud: np.ndarray
    calib: CameraCalibration
    image_size: tuple[int, int]
    boxes2d: list[tuple[str, Rect2D]]
    scene_id: str = ""
    raw_boxes2d: list[tuple[str, Rect2D]] | None = None

    def __post_init__(self):
        self.cloud = np.asarray(self.cloud, dtype=float).reshape(-1, 3)
        W, H = self.image_size
        if self.raw_boxes2d is None:
            self.raw_boxes2d = list(self.boxes2d)
        self.boxes2d = [(cls, rect.clamp(W, H)) for cls, rect in self.boxes2d]


# sample flag: initial_box was supplied (ground truth), not derived from the points
INIT_FROM_GT = "init_from_gt"


@dataclass
class ObjectSample:
    class_label: str
    rect2d: Rect2D
    in_box_points: np.ndarray
    initial_box: Box3D
    constraint_rect: Rect2D
    image_size: tuple[int, int]
    index: int = 0
    flags: tuple[str, ...] = ()


@dataclass
class PrepConfig:
    """Preprocessing settings. ``None`` fields resolve from ``mode``."""

    mode: str = OUTDOOR
    ransac_threshold: float | None = None
    ransac_iterations: int = 200
    vertical_gate_deg: float | None = 30.0
    fps_target: int = 10**6
    cluster_radius: float | None = None
    min_cluster: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (OUTDOOR, INDOOR):
            raise ValueError(f"mode must be {OUTDOOR!r} or {INDOOR!r}, got {self.mode!r}")

    @property
    def threshold(self) -> float:
        if self.ransac_threshold is not None:
            return self.ransac_threshold
        return 0.04 if self.mode == INDOOR else 0.2

    @property
    def radius(self) -> float:
        if self.cluster_radius is not None:
            return self.cluster_radius
        return 0.1 if self.mode == INDOOR else 0.5


@dataclass
class PrepResult:
    samples: list[ObjectSample]
    skipped: dict[int, str] = field(default_factory=dict)
    ground_plane: tuple[np.ndarray, float] | None = None


def farthest_point_sampling(cloud, target_count: int, seed: int = 0) -> np.ndarray:
    """Greedy max-min subsampling to ``target_count`` points.

    The first point is a seeded uniform draw; clouds already within budget are
    returned unchanged.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("farthest point sampling on an empty cloud")
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    n = len(pts)
    if n <= target_count:
        return pts
    rng = np.random.default_rng(seed)
    selected = np.empty(target_count, dtype=np.int64)
    selected[0] = rng.integers(n)
    dist = np.sum((pts - pts[selected[0]]) ** 2, axis=1)
    for i in range(1, target_count):
        nxt = int(np.argmax(dist))
        selected[i] = nxt
        np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=dist)
    return pts[selected]


def _plane_from_points(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    if n[2] < 0:
        n = -n
    return n, -float(n @ p0)


def _refine_plane(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    return n, -float(n @ centroid)


def ransac_ground_removal(cloud, inlier_threshold: float, iterations: int = 200, seed: int = 0,
                          vertical_gate_deg: float | None = 30.0):
    """Fit the ground plane with 3-point RANSAC and drop its inliers.

    Only planes whose normal lies within ``vertical_gate_deg`` of ``+z`` are
    eligible (``None`` disables the gate). The winning model is refined by a
    least-squares fit to its inliers. Returns ``(plane, non_ground, found)``
    where ``plane`` is ``(unit_normal, offset)`` with ``n . p + offset = 0``;
    when no eligible plane exists the cloud is returned unchanged with
    ``found=False`` and ``plane=None``.
    """
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise TooFewPointsError(f"RANSAC needs at least 3 points, got {len(pts)}")
    if inlier_threshold <= 0:
        raise ValueError("inlier_threshold must be positive")
    rng = np.random.default_rng(seed)
    cos_gate = -1.0 if vertical_gate_deg is None else math.cos(math.radians(vertical_gate_deg))

    best = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(len(pts), size=3, replace=False)
        model = _plane_from_points(*pts[idx])
        if model is None:
            continue
        n, d = model
        if vertical_gate_deg is not None and n[2] < cos_gate:
            continue
        count = int(np.count_nonzero(np.abs(pts @ n + d) <= inlier_threshold))
        if count > best_count:
            best, best_count = model, count

    if best is None:
        return None, pts, False

    n, d = best
    inliers = np.abs(pts @ n + d) <= inlier_threshold
    # Maximum consensus drifts up into the bottoms of objects standing on the
    # ground when the band is wide; least-squares re-fits pull it back down.
    for _ in range(REFINE_ROUNDS):
        if np.count_nonzero(inliers) < 3:
            break
        rn, rd = _refine_plane(pts[inliers])
        if vertical_gate_deg is not None and rn[2] < cos_gate:
            break
        refined = np.abs(pts @ rn + rd) <= inlier_threshold
        if np.count_nonzero(refined) < 3:
            break
        converged = np.array_equal(refined, inliers)
        n, d, inliers = rn, rd, refined
        if converged:
            break
    return (n, d), pts[~inliers], True


def frustum_select(cloud, rect: Rect2D, calib: CameraCalibration) -> np.ndarray:
    """Points in front of the camera whose projection falls inside ``rect``."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return pts
    pix, depth = calib.project(pts)
    front = depth > MIN_DEPTH
    inside = np.zeros(len(pts), dtype=bool)
    inside[front] = rect.contains(pix[front])
    return pts[inside]


def cluster_labels(points, radius: float) -> np.ndarray:
    """Single-linkage cluster id per point, linking pairs closer than ``radius``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(pts)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def largest_cluster_denoise(points, radius: float, min_cluster: int = 1, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Keep the largest single-linkage cluster.

    Size ties go to the cluster with the smaller mean range from ``origin``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("denoising an empty point set")
    labels = cluster_labels(pts, radius)
    counts = np.bincount(labels)
    if counts.max() < min_cluster:
        raise NoClusterAboveMinimumError(
            f"largest cluster has {counts.max()} points, below minimum {min_cluster}"
        )
    ranges = np.linalg.norm(pts - np.asarray(origin, dtype=float), axis=1)
    mean_range = np.bincount(labels, weights=ranges) / counts
    candidates = np.flatnonzero(counts == counts.max())
    winner = candidates[np.argmin(mean_range[candidates])]
    return pts[labels == winner]


def _aabb_box(pts) -> Box3D:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    dims = np.maximum(hi - lo, MIN_BOX_DIM)
    c = (lo + hi) / 2.0
    return Box3D.from_yaw(c[0], c[1], c[2], dims[0], dims[1], dims[2], 0.0)


def initial_pseudo_box(points) -> Box3D:
    """Minimum-perimeter BEV box over the points with the points' z-range.

    Dimensions are floored at 5 cm. Raises DegenerateInputError (carrying an
    axis-aligned fallback box) for fewer than 3 points or BEV-collinear sets.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("initial pseudo box of an empty point set")
    try:
        hull = convex_hull_2d(pts[:, :2])
    except DegenerateInputError as exc:
        raise DegenerateInputError(str(exc), fallback=_aabb_box(pts)) from exc
    center, l, w, yaw = min_perimeter_rect_bev(hull)
    zlo, zhi = float(pts[:, 2].min()), float(pts[:, 2].max())
    return Box3D.from_yaw(
        center[0],
        center[1],
        (zlo + zhi) / 2.0,
        max(l, MIN_BOX_DIM),
        max(w, MIN_BOX_DIM),
        max(zhi - zlo, MIN_BOX_DIM),
        yaw,
    )


def pseudo_union_rect(initial_box: Box3D, rect2d: Rect2D, calib: CameraCalibration, image_size) -> Rect2D:
    """Union of ``rect2d`` and the projected pseudo box, clamped to the image."""
    pseudo = min_bounding_rect(project_points(box_corners(initial_box), calib))
    W, H = image_size
    return pseudo.union(rect2d).clamp(W, H)


def prepare_scene(scene: Scene, config: PrepConfig | None = None) -> PrepResult:
    """Turn a scene into per-object samples plus a skip report.

    Objects that fail a stage are reported by index with a reason code.
    """
    config = config or PrepConfig()
    cloud = scene.cloud
    if config.mode == INDOOR:
        cloud = farthest_point_sampling(cloud, config.fps_target, seed=config.seed)

    plane = None
    if len(cloud) >= 3:
        plane, cloud, found = ransac_ground_removal(
            cloud,
            config.threshold,
            config.ransac_iterations,
            seed=config.seed,
            vertical_gate_deg=config.vertical_gate_deg,
        )
        if not found:
            logger.info("scene %s: no ground plane found", scene.scene_id)

    samples: list[ObjectSample] = []
    skipped: dict[int, str] = {}
    for i, (cls, rect) in enumerate(scene.boxes2d):
        pts = frustum_select(cloud, rect, scene.calib)
        if len(pts) == 0:
            skipped[i] = EMPTY_FRUSTUM
            continue
        try:
            pts = largest_cluster_denoise(pts, config.radius, config.min_cluster)
        except NoClusterAboveMinimumError:
            skipped[i] = NO_CLUSTER
            continue
        flags: tuple[str, ...] = ()
        try:
            box = initial_pseudo_box(pts)
        except DegenerateInputError as exc:
            box = exc.fallback
            flags = ("degenerate_initial_box",)
        constraint = rect
        if config.mode == INDOOR:
            try:
                constraint = pseudo_union_rect(box, rect, scene.calib, scene.image_size)
            except NonPositiveDepthError:
                skipped[i] = NON_POSITIVE_DEPTH
                continue
        samples.append(ObjectSample(cls, rect, pts, box, constraint, tuple(scene.image_size), i, flags))
    return PrepResult(samples, skipped, plane)
