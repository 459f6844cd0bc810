"""Command-line entry point.

Exit codes: 0 on success, 1 on usage errors, 2 on data or configuration
errors (the message names the offending file and field).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio, evaluation, report, synthetic
from .geometry import DepthKind, GeometryError
from .metrics import aggregate
from .model import ConfigError, load_weights, save_weights
from .training import TrainingDiverged, distill, load_config, make_student_config, train_teacher, write_history

logger = logging.getLogger("kpdistill")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kpdistill", description="Keypoint detector/descriptor distillation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-shapes", help="write a labeled homography-pair dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)

    s = sub.add_parser("gen-scene", help="render a depth/pose sequence of a synthetic 3D scene")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=6)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--depth-kind", choices=[k.value for k in DepthKind], default=DepthKind.RAY_DISTANCE.value)
    s.add_argument("--lighting", default="1.0", help="comma-separated brightness levels; the trajectory repeats per level")

    t = sub.add_parser("train-teacher", help="train a teacher on a homography-pair dataset")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--dataset", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int)

    d = sub.add_parser("distill", help="distill a teacher checkpoint into a student")
    d.add_argument("--config", required=True, type=Path)
    d.add_argument("--checkpoint", required=True, type=Path, help="teacher weights")
    d.add_argument("--dataset", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)
    d.add_argument("--seed", type=int)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a sequence or homography-pair dataset")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--dataset", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--name", help="model name in the aggregate CSV (default: checkpoint stem)")
    e.add_argument("--threshold-px", type=float, default=3.0)
    e.add_argument("--mutual", type=_bool, default=True)
    e.add_argument("--occlusion", type=_bool, default=True)
    e.add_argument("--score-threshold", type=float, default=0.015)
    e.add_argument("--nms-radius", type=int, default=4)
    e.add_argument("--max-points", type=int, default=500)
    e.add_argument("--pair-gap", type=int, default=1)
    e.add_argument("--random-descriptors", action="store_true", help="baseline: replace descriptors by random unit vectors")
    e.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="render aggregate CSVs as Markdown tables and figures")
    r.add_argument("inputs", nargs="+", type=Path)
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--history", nargs="*", type=Path, default=[], help="loss-history CSVs to plot")
    return p


def _distill_images(path: Path) -> np.ndarray:
    kind = dataio.dataset_kind(path)
    if kind == "pairs":
        pairs = dataio.read_pairs(path)
        return np.stack([im for p in pairs for im in (p.image_a, p.image_b)])
    return np.stack([f.image for f in dataio.read_sequence(path)])


def cmd_gen_shapes(a) -> None:
    dataio.write_pairs(a.out, synthetic.gen_shapes(a.seed, a.count, a.width, a.height))


def cmd_gen_scene(a) -> None:
    try:
        levels = tuple(float(x) for x in a.lighting.split(","))
    except ValueError:
        raise UsageError(f"--lighting: expected comma-separated numbers, got {a.lighting!r}") from None
    if a.width % 8 or a.height % 8:
        raise UsageError("--width and --height must be multiples of 8")
    spec = synthetic.default_scene(a.seed, a.frames, a.width, a.height, a.depth_kind, levels)
    synthetic.gen_scene(spec, a.out)


def cmd_train_teacher(a) -> None:
    cfg = _config(a.config)
    pairs = dataio.read_pairs(a.dataset)
    a.out.mkdir(parents=True, exist_ok=True)
    weights, hist = train_teacher(cfg.model_config(), pairs, cfg, seed=a.seed, checkpoint_dir=a.out)
    save_weights(weights, a.out / "teacher.kpw")
    write_history(hist, a.out / "loss.csv")


def cmd_distill(a) -> None:
    cfg = _config(a.config)
    teacher = load_weights(a.checkpoint)
    images = _distill_images(a.dataset)
    a.out.mkdir(parents=True, exist_ok=True)
    student, hist = distill(teacher, make_student_config(cfg, teacher.config), images, cfg, seed=a.seed, checkpoint_dir=a.out)
    save_weights(student, a.out / "student.kpw")
    write_history(hist, a.out / "loss.csv")


def cmd_eval(a) -> None:
    weights = load_weights(a.checkpoint)
    opts = evaluation.EvalOptions(
        threshold_px=a.threshold_px,
        mutual=a.mutual,
        occlusion=a.occlusion,
        score_threshold=a.score_threshold,
        nms_radius=a.nms_radius,
        max_points=a.max_points,
        pair_gap=a.pair_gap,
        random_descriptors=a.random_descriptors,
        seed=a.seed,
    )
    if dataio.dataset_kind(a.dataset) == "pairs":
        results = evaluation.evaluate_homography_pairs(weights, dataio.read_pairs(a.dataset), opts)
    else:
        results = evaluation.evaluate_sequence(weights, dataio.read_sequence(a.dataset), opts)
    a.out.mkdir(parents=True, exist_ok=True)
    evaluation.write_pair_csv(results, a.out / "pairs.csv")
    name = a.name or a.checkpoint.stem
    report.write_aggregate_csv([aggregate(name, [m for *_, m in results])], a.out / "aggregate.csv")


def cmd_report(a) -> None:
    report.render_report(a.inputs, a.out, a.history)


def _config(path: Path):
    if not path.exists():
        raise dataio.DataError(path, "file not found")
    try:
        return load_config(path)
    except ConfigError as exc:
        raise dataio.DataError(path, str(exc)) from None


COMMANDS = {
    "gen-shapes": cmd_gen_shapes,
    "gen-scene": cmd_gen_scene,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("kpdistill: a subcommand is required: " + " | ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (dataio.DataError, report.ReportError, ConfigError, GeometryError, synthetic.SceneError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
