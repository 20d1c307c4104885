"""Command-line entry point: ``pseudobox {fit,eval,synth,loss-debug,plot-data}``.

Exit status is 0 on success, 1 when some objects were skipped or failed and
2 on fatal errors (bad usage, unreadable input, invalid configuration).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import PseudoBoxError
from .evaluation import DEFAULT_THRESHOLDS, METRICS, evaluate
from .fitter import side_mask
from .geometry import Box3D
from .io.config import ConfigError, config_to_text, load_config
from .io.kitti import scene_ids
from .io.synth import generate_synth_scene, write_synth_dataset
from .losses import PARAM_NAMES, LossProblem
from .pipeline import fit_dataset, fit_scenes, load_box_sets, load_scenes
from .preprocessing import prepare_scene

logger = logging.getLogger("pseudobox")

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2


class _Parser(argparse.ArgumentParser):
    """Exit 2 with the message argparse builds (it names the offending flag)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


def _add_common(p):
    p.add_argument("--config", type=Path, help="INI file with [fit], [preprocess], [synth], [data] sections")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pseudobox", description="Fit 3D pseudo boxes from 2D boxes and point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit pseudo labels for a scene directory or synthetic scenes")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="KITTI-layout directory (velodyne/, calib/, label_2/)")
    src.add_argument("--synth", type=int, metavar="N", help="generate N synthetic scenes from [synth]")
    p.add_argument("--out", type=Path, required=True, help="output directory (label_2/ and fit_report.json)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--init-from-gt", action="store_true", help="start every object from its ground-truth box")
    _add_common(p)

    p = sub.add_parser("eval", help="compare predicted labels with ground truth")
    p.add_argument("--pred", type=Path, required=True, help="prediction directory (label_2/ or label files)")
    p.add_argument("--gt", type=Path, required=True, help="KITTI-layout ground-truth directory")
    p.add_argument("--metric", choices=sorted(METRICS), default="3d")
    p.add_argument("--thresholds", type=float, nargs="+", default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--json", type=Path, help="write the full report as JSON")
    p.add_argument("--csv", type=Path, help="write per-object rows as CSV")
    _add_common(p)

    p = sub.add_parser("synth", help="write synthetic scenes in the KITTI layout")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed", type=int, help="base seed (scene i uses seed + i); overrides synth.seed")
    _add_common(p)

    p = sub.add_parser("loss-debug", help="loss breakdown and gradients for one object")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--scene", required=True, help="scene id")
    p.add_argument("--object", type=int, default=0, help="index among the scene's 2D boxes")
    p.add_argument("--box", help="x,y,z,l,w,h,yaw in the cloud frame (default: the initial pseudo box)")
    _add_common(p)

    p = sub.add_parser("plot-data", help="collect evaluation reports into one CSV series")
    p.add_argument("reports", nargs="+", metavar="LABEL=REPORT.json",
                   help="series label and report path, e.g. 2.4=eval_r24.json")
    p.add_argument("--out", type=Path, required=True)
    return parser


def _synth_scenes(cfg, n: int):
    out = []
    for i in range(n):
        scene, objects = generate_synth_scene(replace(cfg.synth, seed=cfg.synth.seed + i), f"{i:06d}")
        out.append((scene, [(o.class_label, o.box) for o in objects]))
    return out


def _cmd_fit(args, cfg) -> int:
    if args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    if args.data is not None:
        result = fit_dataset(args.data, cfg, args.workers, args.init_from_gt)
    else:
        result = fit_scenes(_synth_scenes(cfg, args.synth), cfg, args.workers, args.init_from_gt)
    result.write(args.out)
    (args.out / "effective_config.ini").write_text(config_to_text(cfg))
    s = result.report["summary"]
    print(f"fitted {s['fitted']}/{s['objects']} objects into {args.out}")
    return EXIT_PARTIAL if result.partial else EXIT_OK


def _pred_dir(path: Path) -> Path:
    return path / "label_2" if (path / "label_2").is_dir() else path


def _cmd_eval(args, cfg) -> int:
    ids = sorted(p.stem for p in (args.gt / "label_2").glob("*.txt"))
    pred_dir = _pred_dir(args.pred)
    pred_ids = sorted(p.stem for p in pred_dir.glob("*.txt"))
    if pred_ids != ids:
        raise PseudoBoxError(f"prediction files in {pred_dir} do not match ground-truth scenes in {args.gt}")
    gt = load_box_sets(args.gt / "label_2", args.gt / "calib", ids, cfg.classes)
    pred = load_box_sets(pred_dir, args.gt / "calib", ids, cfg.classes)
    report = evaluate(gt, pred, args.thresholds, args.metric)
    if args.json:
        report.write_json(args.json)
    if args.csv:
        report.write_csv(args.csv)
    summary = report.as_dict()
    summary.pop("records")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args, cfg) -> int:
    base = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    specs = [replace(base, seed=base.seed + i) for i in range(args.scenes)]
    ids = write_synth_dataset(args.out, specs)
    print(f"wrote {len(ids)} scenes to {args.out}")
    return EXIT_OK


def _parse_box(text: str) -> Box3D:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"--box: cannot parse {text!r}") from None
    if len(vals) != 7:
        raise ConfigError(f"--box needs 7 comma-separated values, got {len(vals)}")
    return Box3D.from_vector(vals)


def _cmd_loss_debug(args, cfg) -> int:
    if args.scene not in scene_ids(args.data):
        raise PseudoBoxError(f"no scene {args.scene!r} under {args.data}")
    scene, _ = load_scenes(args.data, cfg, [args.scene])[0]
    prep = prepare_scene(scene, cfg.prep)
    if args.object in prep.skipped:
        print(f"object {args.object} skipped: {prep.skipped[args.object]}", file=sys.stderr)
        return EXIT_PARTIAL
    found = [s for s in prep.samples if s.index == args.object]
    if not found:
        raise PseudoBoxError(f"scene {args.scene} has no object {args.object}")
    sample = found[0]
    box = sample.initial_box if args.box is None else _parse_box(args.box)
    mask = side_mask(sample.constraint_rect, sample.image_size, cfg.fit.border_margin)
    prior = cfg.fit.ratio_priors.get(sample.class_label)
    problem = LossProblem(sample.in_box_points, sample.constraint_rect, scene.calib, cfg.fit.weights,
                          prior, mask, cfg.fit.pal_mode)
    theta = box.to_vector()
    analytic = problem.analytic_gradient(theta)
    numeric = problem.numeric_gradient(theta)
    out = {
        "scene_id": args.scene,
        "object": args.object,
        "class": sample.class_label,
        "box": dict(zip(PARAM_NAMES, map(float, theta))),
        "side_mask": [int(m) for m in mask],
        "losses": problem.breakdown(theta).as_dict(),
        "gradient": {
            name: {"analytic": float(a), "numeric": float(n), "flagged": bool(fa or fn)}
            for name, a, n, fa, fn in zip(PARAM_NAMES, analytic.grad, numeric.grad, analytic.flagged, numeric.flagged)
        },
    }
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_plot_data(args, cfg) -> int:
    series = []
    for item in args.reports:
        label, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"report argument {item!r} is not LABEL=PATH")
        with open(path) as fh:
            series.append((label, json.load(fh)))
    thresholds = sorted({t for _, rep in series for t in rep["overall"]["recall"]}, key=float)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["series", "class", "matched", "total", "mean_iou"] + [f"recall@{t}" for t in thresholds])
        for label, rep in series:
            groups = [("all", rep["overall"])] + sorted(rep["per_class"].items())
            for cls, st in groups:
                mean = "" if st["mean_iou"] is None else f"{st['mean_iou']:.6f}"
                recall = [f"{st['recall'][t]:.6f}" if t in st["recall"] else "" for t in thresholds]
                wr.writerow([label, cls, st["matched"], st["total"], mean] + recall)
    print(f"wrote {len(series)} series to {args.out}")
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "loss-debug": _cmd_loss_debug,
    "plot-data": _cmd_plot_data,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "overrides", ()))
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, PseudoBoxError, OSError, ValueError) as exc:
        print(f"pseudobox {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FATAL


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
