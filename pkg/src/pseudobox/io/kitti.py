"""KITTI velodyne, calibration and label files.

Frame conventions follow the KITTI devkit. Labels live in the rectified
camera frame with ``location`` at the bottom-center of the box, ``dimensions``
ordered ``(h, w, l)`` and ``rotation_y`` about the camera's (downward) y axis.
Inside this package boxes are gravity-centered in the velodyne frame.

The heading conversion is ``yaw = psi - rotation_y - pi/2`` where ``psi`` is
the velodyne-frame heading of the camera's optical axis (0 for an exactly
forward-facing camera). It is exactly invertible, which keeps label
round-trips byte-stable.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import MalformedCalibError, MalformedLabelError, TruncatedBinaryError
from ..geometry import Box3D, CameraCalibration, Rect2D
from ..preprocessing import Scene

DONT_CARE = "DontCare"
DECIMALS = 6

# lower end of the serialized angle interval sits on a 6-decimal rounding
# midpoint, so re-reading and re-writing an angle never crosses the wrap
_ANGLE_LOW = -3.1415925


def _wrap_for_output(a: float) -> float:
    return (a - _ANGLE_LOW) % (2.0 * math.pi) + _ANGLE_LOW


def _fmt(v: float) -> str:
    s = f"{v:.{DECIMALS}f}"
    return "0.000000" if s == "-0.000000" else s


# -- velodyne -----------------------------------------------------------------


def read_velodyne(path) -> np.ndarray:
    """Little-endian float32 (x, y, z, intensity) records; intensity dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) // 16 * 16
        raise TruncatedBinaryError(path, f"byte {whole}", f"{len(raw) - whole} trailing bytes do not form a point")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return data[:, :3].astype(np.float64)


def write_velodyne(path, points, intensity=None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.zeros((len(pts), 4), dtype="<f4")
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    Path(path).write_bytes(rec.tobytes())


# -- calibration --------------------------------------------------------------

_CALIB_SIZES = {"P0": 12, "P1": 12, "P2": 12, "P3": 12, "R0_rect": 9, "Tr_velo_to_cam": 12, "Tr_imu_to_velo": 12}
_REQUIRED = ("P2", "R0_rect", "Tr_velo_to_cam")


def parse_calib(path) -> dict[str, np.ndarray]:
    """Raw matrices keyed by name, as flat float arrays."""
    mats: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise MalformedCalibError(path, f"line {lineno}", "expected 'KEY: values'")
            key, _, rest = line.partition(":")
            key = key.strip()
            try:
                vals = np.array([float(t) for t in rest.split()])
            except ValueError:
                raise MalformedCalibError(path, f"line {lineno}", f"non-numeric value in {key}") from None
            want = _CALIB_SIZES.get(key)
            if want is not None and len(vals) != want:
                raise MalformedCalibError(path, f"line {lineno}", f"{key} needs {want} values, got {len(vals)}")
            mats[key] = vals
    for key in _REQUIRED:
        if key not in mats:
            raise MalformedCalibError(path, "end of file", f"missing {key}")
    return mats


def read_calib(path) -> CameraCalibration:
    """Compose ``P2 @ R0_rect @ Tr_velo_to_cam`` with homogeneous padding."""
    m = parse_calib(path)
    R0 = np.eye(4)
    R0[:3, :3] = m["R0_rect"].reshape(3, 3)
    Tr = np.eye(4)
    Tr[:3, :] = m["Tr_velo_to_cam"].reshape(3, 4)
    try:
        return CameraCalibration(m["P2"].reshape(3, 4), R0 @ Tr)
    except ValueError as exc:
        raise MalformedCalibError(path, "P2", str(exc)) from None


def write_calib(path, calib: CameraCalibration) -> None:
    """Write ``calib`` as a KITTI calib file (R0_rect folded into Tr_velo_to_cam)."""

    def row(key, mat):
        return key + ": " + " ".join(f"{v:.12e}" for v in np.asarray(mat).ravel())

    P = calib.intrinsics
    lines = [row(f"P{i}", P) for i in range(4)]
    lines.append(row("R0_rect", np.eye(3)))
    lines.append(row("Tr_velo_to_cam", calib.cloud_to_cam[:3, :]))
    lines.append(row("Tr_imu_to_velo", np.eye(4)[:3, :]))
    Path(path).write_text("\n".join(lines) + "\n")


# -- labels -------------------------------------------------------------------


@dataclass(frozen=True)
class KittiLabelRow:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center, camera frame
    rotation_y: float
    score: float | None = None

    def to_line(self) -> str:
        fields = [self.type, _fmt(self.truncated), str(int(self.occluded)), _fmt(self.alpha)]
        fields += [_fmt(v) for v in self.bbox]
        fields += [_fmt(v) for v in self.dimensions]
        fields += [_fmt(v) for v in self.location]
        fields.append(_fmt(self.rotation_y))
        if self.score is not None:
            fields.append(_fmt(self.score))
        return " ".join(fields)

    @property
    def rect(self) -> Rect2D:
        return Rect2D(*self.bbox)


def parse_label_line(line: str, path="<string>", lineno: int = 1) -> KittiLabelRow:
    tok = line.split()
    if len(tok) not in (15, 16):
        raise MalformedLabelError(path, f"line {lineno}", f"expected 15 or 16 fields, got {len(tok)}")
    try:
        vals = [float(t) for t in tok[1:]]
    except ValueError:
        raise MalformedLabelError(path, f"line {lineno}", "non-numeric field") from None
    occ = vals[1]
    if occ != int(occ):
        raise MalformedLabelError(path, f"line {lineno}", f"occlusion must be an integer, got {tok[2]}")
    row = KittiLabelRow(
        type=tok[0],
        truncated=vals[0],
        occluded=int(occ),
        alpha=vals[2],
        bbox=tuple(vals[3:7]),
        dimensions=tuple(vals[7:10]),
        location=tuple(vals[10:13]),
        rotation_y=vals[13],
        score=vals[14] if len(vals) == 15 else None,
    )
    if row.type != DONT_CARE:
        if not all(d > 0 for d in row.dimensions):
            raise MalformedLabelError(path, f"line {lineno}", f"non-positive dimensions {row.dimensions}")
        if not 0.0 <= row.truncated <= 1.0:
            raise MalformedLabelError(path, f"line {lineno}", f"truncation {row.truncated} outside [0, 1]")
        if row.occluded not in (0, 1, 2, 3):
            raise MalformedLabelError(path, f"line {lineno}", f"occlusion {row.occluded} not in 0..3")
        if not (row.bbox[0] <= row.bbox[2] and row.bbox[1] <= row.bbox[3]):
            raise MalformedLabelError(path, f"line {lineno}", f"inverted 2D box {row.bbox}")
    return row


def read_labels(path) -> list[KittiLabelRow]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                rows.append(parse_label_line(line, path, lineno))
    return rows


def _optical_heading(calib: CameraCalibration) -> float:
    R = calib.cloud_to_cam[:3, :3]
    f = np.linalg.solve(R, np.array([0.0, 0.0, 1.0]))
    if math.hypot(f[0], f[1]) < 1e-9:
        return 0.0
    return math.atan2(f[1], f[0])


def label_to_box(row: KittiLabelRow, calib: CameraCalibration) -> Box3D:
    """Camera-frame bottom-center label to a gravity-centered cloud-frame box."""
    h, w, l = row.dimensions
    x, y, z = row.location
    center = calib.camera_to_cloud([x, y - h / 2.0, z])[0]
    yaw = _optical_heading(calib) - row.rotation_y - math.pi / 2.0
    return Box3D.from_yaw(center[0], center[1], center[2], l, w, h, yaw)


def box_to_label(cls: str, box: Box3D, rect: Rect2D, calib: CameraCalibration, score=None,
                 truncated: float = 0.0, occluded: int = 0) -> KittiLabelRow:
    cam = calib.cloud_to_camera(box.center)[0]
    loc = (float(cam[0]), float(cam[1] + box.h / 2.0), float(cam[2]))
    ry = _wrap_for_output(_optical_heading(calib) - box.yaw - math.pi / 2.0)
    # alpha from the values as written, so a re-read row reproduces it exactly
    alpha = _wrap_for_output(round(ry, DECIMALS) - math.atan2(round(loc[0], DECIMALS), round(loc[2], DECIMALS)))
    return KittiLabelRow(
        type=cls,
        truncated=truncated,
        occluded=occluded,
        alpha=alpha,
        bbox=(rect.x_min, rect.y_min, rect.x_max, rect.y_max),
        dimensions=(box.h, box.w, box.l),
        location=loc,
        rotation_y=ry,
        score=score,
    )


def format_labels(rows) -> str:
    return "".join(r.to_line() + "\n" for r in rows)


def write_label_rows(rows, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(format_labels(rows))
    os.replace(tmp, path)


def write_kitti_labels(results, calib: CameraCalibration, path) -> None:
    """Write ``(class, Box3D, Rect2D)`` triples as KITTI label rows."""
    write_label_rows([box_to_label(cls, box, rect, calib) for cls, box, rect in results], path)


def read_kitti_scene(velodyne_path, calib_path, label_path, image_size, classes=None, scene_id=""):
    """Load one frame. Returns ``(scene, gt)`` with ``gt`` a list of ``(class, Box3D)``.

    ``classes`` restricts which labelled objects are kept (DontCare is always
    dropped). The scene's 2D boxes are clamped to the image; the unclamped
    extents stay available as ``scene.raw_boxes2d``.
    """
    cloud = read_velodyne(velodyne_path)
    calib = read_calib(calib_path)
    rows = read_labels(label_path) if label_path is not None else []
    keep = [r for r in rows if r.type != DONT_CARE and (classes is None or r.type in classes)]
    scene = Scene(cloud, calib, tuple(image_size), [(r.type, r.rect) for r in keep], scene_id=scene_id)
    gt = [(r.type, label_to_box(r, calib)) for r in keep]
    return scene, gt


def scene_ids(root) -> list[str]:
    """Frame ids present under ``root/velodyne``, sorted."""
    vel = Path(root) / "velodyne"
    return sorted(p.stem for p in vel.glob("*.bin"))


def scene_paths(root, scene_id: str) -> tuple[Path, Path, Path]:
    root = Path(root)
    return (
        root / "velodyne" / f"{scene_id}.bin",
        root / "calib" / f"{scene_id}.txt",
        root / "label_2" / f"{scene_id}.txt",
    )
