"""Synthetic single-view scenes with known 3D boxes.

The camera and the range sensor share the origin of the cloud frame. Boxes sit
on a flat ground plane at ``z = -camera_height``. Only the box faces that turn
towards the sensor receive points, and the expected point count per face
scales with its area, the cosine of the viewing angle and the inverse square
of its range, so grazing and distant faces are sparse. 2D boxes are the
minimum bounding rectangles of each object's projected visible surface as the
camera sees it: the noise-free samples together with the vertices of every
visible face.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..errors import PlacementFailureError
from ..geometry import Box3D, CameraCalibration, Rect2D, bev_iou, box_corners, min_bounding_rect
from ..preprocessing import INDOOR, OUTDOOR, Scene

PLACEMENT_ROUNDS = 5

# optical axis along +x, image x to the right (-y), image y down (-z)
_AXES = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

# (outward normal in box frame, the two in-face axes as indices into (l, w, h))
_FACES = (
    ((1.0, 0.0, 0.0), (1, 2)),
    ((-1.0, 0.0, 0.0), (1, 2)),
    ((0.0, 1.0, 0.0), (0, 2)),
    ((0.0, -1.0, 0.0), (0, 2)),
    ((0.0, 0.0, 1.0), (0, 1)),
    ((0.0, 0.0, -1.0), (0, 1)),
)


@dataclass(frozen=True)
class ClassSpec:
    """Length distribution, BEV ratio and height distribution for one class."""

    length_mean: float
    length_std: float
    ratio: float
    height_mean: float
    height_std: float
    length_range: tuple[float, float] = (0.0, math.inf)

    def sample(self, rng) -> tuple[float, float, float]:
        lo, hi = self.length_range
        l = float(np.clip(rng.normal(self.length_mean, self.length_std), lo, hi))
        h = float(max(rng.normal(self.height_mean, self.height_std), 0.1))
        return l, l / self.ratio, h


CAR = ClassSpec(4.0, 0.25, 2.4, 1.55, 0.08, (3.4, 4.8))

INDOOR_CLASSES = {
    "bed": ClassSpec(2.0, 0.1, 1.4, 0.6, 0.05, (1.8, 2.2)),
    "table": ClassSpec(1.4, 0.15, 1.7, 0.75, 0.04, (1.0, 1.8)),
    "sofa": ClassSpec(2.0, 0.15, 2.2, 0.85, 0.05, (1.6, 2.4)),
}


@dataclass
class SynthSceneSpec:
    """Everything needed to draw one scene; deterministic given ``seed``."""

    seed: int = 0
    object_count: tuple[int, int] = (1, 3)
    classes: dict = field(default_factory=lambda: {"Car": CAR})
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    range_limits: tuple[float, float] = (6.0, 30.0)
    # points per square metre on a face seen head-on from ``reference_range``
    density: float = 250.0
    reference_range: float = 10.0
    noise_sigma: float = 0.02
    focal: float = 721.5377
    principal_point: tuple[float, float] = (609.5593, 172.854)
    image_size: tuple[int, int] = (1242, 375)
    camera_height: float = 1.65
    pitch_deg: float = 0.0
    ground_points: int = 4000
    ground_extent: float = 40.0
    clutter_points: int = 20
    min_gap: float = 0.5
    image_margin: float = 4.0
    allow_truncation: bool = False
    max_attempts: int = 200
    mode: str = OUTDOOR

    def __post_init__(self):
        if self.density < 0 or self.noise_sigma < 0:
            raise ValueError("density and noise_sigma must be >= 0")
        lo, hi = self.object_count
        if not 0 <= lo <= hi:
            raise ValueError(f"invalid object_count {self.object_count}")
        if self.mode not in (OUTDOOR, INDOOR):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def indoor(cls, **kw) -> "SynthSceneSpec":
        base = dict(
            classes=dict(INDOOR_CLASSES),
            object_count=(1, 2),
            range_limits=(2.0, 6.0),
            density=400.0,
            reference_range=3.0,
            noise_sigma=0.005,
            focal=529.5,
            principal_point=(365.0, 265.0),
            image_size=(730, 530),
            camera_height=1.2,
            pitch_deg=20.0,
            ground_points=3000,
            ground_extent=7.0,
            clutter_points=10,
            min_gap=0.3,
            max_attempts=500,
            mode=INDOOR,
        )
        base.update(kw)
        return cls(**base)

    def calibration(self) -> CameraCalibration:
        p = math.radians(self.pitch_deg)
        # positive pitch tilts the optical axis towards the ground
        tilt = np.array([[1.0, 0.0, 0.0], [0.0, math.cos(p), -math.sin(p)], [0.0, math.sin(p), math.cos(p)]])
        T = np.eye(4)
        T[:3, :3] = tilt @ _AXES
        fx = self.focal
        cx, cy = self.principal_point
        return CameraCalibration.pinhole(fx, cx, cy, T)


@dataclass
class SynthObject:
    """Ground truth for one generated object.

    ``points`` are the noisy sensor samples of the object's visible faces and
    ``surface`` the same samples before noise.
    """

    class_label: str
    box: Box3D
    rect2d: Rect2D
    points: np.ndarray
    surface: np.ndarray


def _visible_faces(box: Box3D):
    """Yields (center, normal, in-face axes, half extents) of faces turned towards the origin."""
    R = np.array([[box.yaw_cos, -box.yaw_sin, 0.0], [box.yaw_sin, box.yaw_cos, 0.0], [0.0, 0.0, 1.0]])
    half = box.dims / 2.0
    c0 = box.center
    for normal, (a, b) in _FACES:
        n_local = np.array(normal)
        n = R @ n_local
        k = int(np.flatnonzero(n_local)[0])
        center = c0 + R @ (n_local * half[k])
        if n @ center >= 0:
            continue
        yield center, n, (R[:, a], R[:, b]), (half[a], half[b])


def sample_visible_surface(box: Box3D, rng, density: float, reference_range: float) -> np.ndarray:
    """Noise-free points on the faces of ``box`` visible from the origin."""
    chunks = []
    for center, n, (ea, eb), (ha, hb) in _visible_faces(box):
        dist = float(np.linalg.norm(center))
        cos_inc = abs(float(n @ center)) / dist
        area = 4.0 * ha * hb
        expected = density * area * cos_inc * (reference_range / dist) ** 2
        count = int(rng.poisson(expected))
        if count == 0:
            continue
        st = rng.uniform(-1.0, 1.0, size=(count, 2))
        chunks.append(center + np.outer(st[:, 0] * ha, ea) + np.outer(st[:, 1] * hb, eb))
    if not chunks:
        return np.zeros((0, 3))
    return np.vstack(chunks)


def visible_face_vertices(box: Box3D) -> np.ndarray:
    """Corners of every face of ``box`` turned towards the origin."""
    verts = []
    for center, _, (ea, eb), (ha, hb) in _visible_faces(box):
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            verts.append(center + sa * ha * ea + sb * hb * eb)
    return np.array(verts).reshape(-1, 3)


def _in_view(box: Box3D, calib: CameraCalibration, image_size, margin: float) -> bool:
    pix, depth = calib.project(box_corners(box))
    if np.any(depth <= 0.5):
        return False
    W, H = image_size
    return bool(
        pix[:, 0].min() >= margin
        and pix[:, 1].min() >= margin
        and pix[:, 0].max() <= W - margin
        and pix[:, 1].max() <= H - margin
    )


def _corner_rect(box: Box3D, calib: CameraCalibration) -> Rect2D:
    return min_bounding_rect(calib.project(box_corners(box))[0])


def _rects_overlap(a: Rect2D, b: Rect2D) -> bool:
    return not (a.x_max < b.x_min or b.x_max < a.x_min or a.y_max < b.y_min or b.y_max < a.y_min)


def _grown(box: Box3D, gap: float) -> Box3D:
    return replace(box, l=box.l + gap, w=box.w + gap)


def _place_once(spec: SynthSceneSpec, calib: CameraCalibration, rng, n: int, half_fov: float):
    names = sorted(spec.classes)
    ground = -spec.camera_height
    placed: list[tuple[str, Box3D, Rect2D]] = []
    for _ in range(n):
        for _attempt in range(spec.max_attempts):
            cls = names[int(rng.integers(len(names)))]
            l, w, h = spec.classes[cls].sample(rng)
            r = rng.uniform(*spec.range_limits)
            az = rng.uniform(-half_fov, half_fov)
            yaw = rng.uniform(*spec.yaw_range)
            box = Box3D.from_yaw(r * math.cos(az), r * math.sin(az), ground + h / 2.0, l, w, h, yaw)
            if not spec.allow_truncation and not _in_view(box, calib, spec.image_size, spec.image_margin):
                continue
            rect = _corner_rect(box, calib)
            if any(bev_iou(_grown(box, spec.min_gap), _grown(b, spec.min_gap)) > 0 or _rects_overlap(rect, rr)
                   for _, b, rr in placed):
                continue
            placed.append((cls, box, rect))
            break
        else:
            return placed, False
    return placed, True


def _place_objects(spec: SynthSceneSpec, calib: CameraCalibration, rng):
    lo, hi = spec.object_count
    n = int(rng.integers(lo, hi + 1))
    W = spec.image_size[0]
    half_fov = math.atan2(max(spec.principal_point[0], W - spec.principal_point[0]), spec.focal)
    # an early object can leave no room for the rest; start over rather than fail
    for _ in range(PLACEMENT_ROUNDS):
        placed, ok = _place_once(spec, calib, rng, n, half_fov)
        if ok:
            return placed
    raise PlacementFailureError(
        f"could not place {n} objects in {PLACEMENT_ROUNDS} rounds of {spec.max_attempts} attempts per object"
    )


def _inside_any_footprint(xy, boxes, pad: float) -> np.ndarray:
    hit = np.zeros(len(xy), dtype=bool)
    for b in boxes:
        d = xy - np.array([b.cx, b.cy])
        u = d[:, 0] * b.yaw_cos + d[:, 1] * b.yaw_sin
        v = -d[:, 0] * b.yaw_sin + d[:, 1] * b.yaw_cos
        hit |= (np.abs(u) <= b.l / 2.0 + pad) & (np.abs(v) <= b.w / 2.0 + pad)
    return hit


def generate_synth_scene(spec: SynthSceneSpec, scene_id: str = "") -> tuple[Scene, list[SynthObject]]:
    """Draw a scene and its ground truth. Same spec, same output."""
    rng = np.random.default_rng(spec.seed)
    calib = spec.calibration()
    placed = _place_objects(spec, calib, rng)
    boxes = [b for _, b, _ in placed]

    objects = []
    for cls, box, _ in placed:
        surface = sample_visible_surface(box, rng, spec.density, spec.reference_range)
        noisy = surface + rng.normal(0.0, spec.noise_sigma, size=surface.shape) if len(surface) else surface
        # the camera sees the whole visible surface, free of range noise
        seen = np.vstack([surface, visible_face_vertices(box)])
        rect = min_bounding_rect(calib.project(seen)[0])
        objects.append(SynthObject(cls, box, rect, noisy, surface))

    ground_z = -spec.camera_height
    W = spec.image_size[0]
    half_fov = math.atan2(max(spec.principal_point[0], W - spec.principal_point[0]), spec.focal)
    near = 0.5 * spec.range_limits[0]
    gx = rng.uniform(near, spec.ground_extent, size=spec.ground_points)
    gy = rng.uniform(-1.0, 1.0, size=spec.ground_points) * gx * math.tan(half_fov)
    gz = ground_z + rng.normal(0.0, spec.noise_sigma, size=spec.ground_points)
    ground = np.column_stack([gx, gy, gz])
    ground = ground[~_inside_any_footprint(ground[:, :2], boxes, 0.0)]

    cx = rng.uniform(near, spec.ground_extent, size=spec.clutter_points)
    cy = rng.uniform(-1.0, 1.0, size=spec.clutter_points) * cx * math.tan(half_fov)
    cz = ground_z + rng.uniform(0.3, 2.0, size=spec.clutter_points)
    clutter = np.column_stack([cx, cy, cz])
    clutter = clutter[~_inside_any_footprint(clutter[:, :2], boxes, 1.0)]

    cloud = np.vstack([o.points for o in objects] + [ground, clutter])
    scene = Scene(cloud, calib, tuple(spec.image_size), [(o.class_label, o.rect2d) for o in objects],
                  scene_id=scene_id)
    return scene, objects


def benchmark_specs(n_scenes: int = 50, base_seed: int = 0, **kw) -> list[SynthSceneSpec]:
    """Specs for an ``n_scenes`` car benchmark, scene ``i`` seeded ``base_seed + i``."""
    return [SynthSceneSpec(seed=base_seed + i, **kw) for i in range(n_scenes)]


def write_synth_dataset(root, specs) -> list[str]:
    """Write scenes in the KITTI directory layout; returns the scene ids."""
    from .kitti import box_to_label, write_calib, write_label_rows, write_velodyne

    root = Path(root)
    for sub in ("velodyne", "calib", "label_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for i, spec in enumerate(specs):
        sid = f"{i:06d}"
        scene, objects = generate_synth_scene(spec, sid)
        write_velodyne(root / "velodyne" / f"{sid}.bin", scene.cloud)
        write_calib(root / "calib" / f"{sid}.txt", scene.calib)
        rows = [box_to_label(o.class_label, o.box, o.rect2d, scene.calib) for o in objects]
        write_label_rows(rows, root / "label_2" / f"{sid}.txt")
        ids.append(sid)
    return ids
