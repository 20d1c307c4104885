"""Library-level pipeline over a KITTI-layout directory.

``fit_dataset`` is what the ``fit`` subcommand runs; calling it directly
produces exactly the label text and report the command writes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from .fitter import FitFailure, fit_many
from .io.config import RunConfig
from .io.kitti import box_to_label, format_labels, read_kitti_scene, scene_ids, scene_paths
from .preprocessing import INIT_FROM_GT, prepare_scene

logger = logging.getLogger(__name__)

FITTED = "fitted"
SKIPPED = "skipped"
FAILED = "failed"


@dataclass
class DatasetFit:
    """Label text per scene id plus a JSON-serialisable report."""

    labels: dict[str, str] = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return any(o["status"] != FITTED for s in self.report.get("scenes", []) for o in s["objects"])

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "label_2").mkdir(parents=True, exist_ok=True)
        for sid, text in self.labels.items():
            path = out / "label_2" / f"{sid}.txt"
            tmp = path.with_suffix(".txt.tmp")
            tmp.write_text(text)
            tmp.replace(path)
        (out / "fit_report.json").write_text(self.report_json())


def _losses(b) -> dict:
    return {k: float(v) for k, v in b.as_dict().items()}


def _prepared(scene, gt, cfg: RunConfig, init_from_gt: bool):
    prep = prepare_scene(scene, cfg.prep)
    samples = prep.samples
    if init_from_gt:
        samples = [replace(s, initial_box=gt[s.index][1], flags=s.flags + (INIT_FROM_GT,)) for s in samples]
    return samples, prep.skipped


def fit_scenes(scenes, cfg: RunConfig, workers: int = 1, init_from_gt: bool = False) -> DatasetFit:
    """Prepare and fit ``[(scene, gt), ...]``; scene ids key the output.

    With ``init_from_gt`` each object starts from its ground-truth box instead
    of the box fitted to its points (``gt`` must then be aligned with
    ``scene.boxes2d``).
    """
    prepared = []
    jobs = []
    for scene, gt in scenes:
        samples, skipped = _prepared(scene, gt, cfg, init_from_gt)
        prepared.append((scene, samples, skipped))
        jobs.extend((s, scene.calib) for s in samples)

    results = fit_many(jobs, cfg.fit, workers)
    out = DatasetFit()
    report_scenes = []
    k = 0
    for scene, samples, skipped in prepared:
        by_index = {}
        for s in samples:
            by_index[s.index] = (s, results[k])
            k += 1
        rows, objects = [], []
        for i, (cls, _) in enumerate(scene.boxes2d):
            entry = {"index": i, "class": cls}
            if i in skipped:
                entry.update(status=SKIPPED, reason=skipped[i])
            else:
                sample, res = by_index[i]
                if isinstance(res, FitFailure):
                    entry.update(status=FAILED, reason=res.reason)
                else:
                    entry.update(
                        status=FITTED,
                        start_index=res.start_index,
                        iterations=res.iterations_used,
                        converged=res.converged,
                        initial_losses=_losses(res.initial_losses),
                        final_losses=_losses(res.final_losses),
                        flags=list(sample.flags),
                    )
                    rows.append(box_to_label(cls, res.box, sample.rect2d, scene.calib))
            objects.append(entry)
        out.labels[scene.scene_id] = format_labels(rows)
        report_scenes.append({"scene_id": scene.scene_id, "objects": objects})

    finals = [o["final_losses"]["total"] for s in report_scenes for o in s["objects"] if o["status"] == FITTED]
    out.report = {
        "scenes": report_scenes,
        "summary": {
            "objects": sum(len(s["objects"]) for s in report_scenes),
            "fitted": len(finals),
            "mean_final_total": (sum(finals) / len(finals)) if finals else None,
        },
    }
    return out


def load_scenes(root, cfg: RunConfig, ids=None):
    """``[(scene, gt), ...]`` for every frame under a KITTI-layout ``root``."""
    ids = scene_ids(root) if ids is None else list(ids)
    out = []
    for sid in ids:
        vel, cal, lab = scene_paths(root, sid)
        out.append(read_kitti_scene(vel, cal, lab if lab.exists() else None, cfg.image_size, cfg.classes, scene_id=sid))
    return out


def fit_dataset(root, cfg: RunConfig, workers: int = 1, init_from_gt: bool = False, ids=None) -> DatasetFit:
    """Library equivalent of the ``fit`` subcommand on a scene directory."""
    return fit_scenes(load_scenes(root, cfg, ids), cfg, workers, init_from_gt)


def load_box_sets(label_dir, calib_dir, ids, classes=None):
    """``{scene_id: [(class, Box3D), ...]}`` read from KITTI label files."""
    from .io.kitti import DONT_CARE, label_to_box, read_calib, read_labels

    out = {}
    for sid in ids:
        calib = read_calib(Path(calib_dir) / f"{sid}.txt")
        path = Path(label_dir) / f"{sid}.txt"
        rows = read_labels(path) if path.exists() else []
        out[sid] = [
            (r.type, label_to_box(r, calib))
            for r in rows
            if r.type != DONT_CARE and (classes is None or r.type in classes)
        ]
    return out


__all__ = ["DatasetFit", "fit_scenes", "fit_dataset", "load_scenes", "load_box_sets"]
