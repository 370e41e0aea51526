"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid config, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, ExperimentConfig, default_config_text, load_config
from .scene_io import SceneFormatError, generate_dataset, read_dataset, read_scene, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

MASK_OUTPUTS = ("labels", "mask_m", "scaling_s", "attn_teacher", "attn_student", "attn_combined")

log = logging.getLogger("distillbev")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI experiment config (default: built-in defaults)")
    p.add_argument("--seed", type=int, help="overrides [experiment] seed")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="distillbev", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="write a DBS1 dataset directory", formatter_class=fmt)
    _add_config(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, help="number of scenes (default: [experiment] n_scenes)")

    p = sub.add_parser("train-teacher", help="train the teacher and write a DBW1 checkpoint", formatter_class=fmt)
    _add_config(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="teacher checkpoint path")

    p = sub.add_parser("distill", help="train a student (distillation per [train] distill)", formatter_class=fmt)
    _add_config(p)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--eval-data", help="dataset used for per-epoch metrics (default: --data)")
    p.add_argument("--out", help="output directory (default: [experiment] output_dir)")

    p = sub.add_parser("eval", help="print metrics for a checkpoint as JSON", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="teacher or student checkpoint")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--teacher", help="teacher checkpoint (needed to score a student's features)")

    p = sub.add_parser("masks", help="dump partition, mask, scaling and attention maps for one scene",
                       formatter_class=fmt)
    _add_config(p)
    p.add_argument("--sample", required=True, help="a .dbs1 scene file")
    p.add_argument("--out", default="masks", help="output directory")
    p.add_argument("--teacher", help="teacher checkpoint (default: simulated teacher heatmap, fresh networks)")
    p.add_argument("--student", help="student checkpoint (default: freshly initialized student)")

    p = sub.add_parser("plot", help="render metrics CSVs as SVG learning curves", formatter_class=fmt)
    p.add_argument("--metrics", required=True, help="metrics CSV of the distilled run")
    p.add_argument("--baseline", help="metrics CSV of the run without distillation")
    p.add_argument("--out", default="curves.svg", help="output SVG path")

    sub.add_parser("config", help="print a config file with every default", formatter_class=fmt)
    return parser


def _experiment(args) -> ExperimentConfig:
    from dataclasses import replace
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed, train=replace(cfg.train, seed=args.seed))
    return cfg


def write_metrics_csv(path: Path, rows, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_metrics_csv(path: Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cmd_gen(args) -> int:
    cfg = _experiment(args)
    count = args.count if args.count is not None else cfg.n_scenes
    samples = generate_dataset(cfg.scene, cfg.seed, count)
    write_dataset(args.out, samples, cfg.scene, cfg.seed)
    print(f"wrote {count} scenes to {args.out}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    from .harness.train import train_teacher
    cfg = _experiment(args)
    samples, _ = read_dataset(args.data)
    teacher, history = train_teacher(samples, cfg.train)
    checkpoint.save(args.out, teacher.state())
    print(f"teacher loss {history[0]:.6f} -> {history[-1]:.6f}; wrote {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    from .harness.train import LAYER_COLUMNS, METRIC_COLUMNS, load_teacher, train_student
    cfg = _experiment(args)
    samples, _ = read_dataset(args.data)
    evals = read_dataset(args.eval_data)[0] if args.eval_data else None
    teacher = load_teacher(args.teacher)
    student, rows, layer_rows = train_student(samples, teacher, cfg.train, cfg.distill, evals)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    student.save(out / "student.dbw")
    write_metrics_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    write_metrics_csv(out / "layer_losses.csv", layer_rows, LAYER_COLUMNS)
    last = rows[-1]
    print(f"final feature_mse_to_teacher {last[3]:.6f} synthetic_ap {last[4]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness.networks import ToyNetwork
    from .harness.train import StudentBundle, evaluate_student, evaluate_teacher
    arrays = checkpoint.load(args.checkpoint)
    samples, _ = read_dataset(args.data)
    if "student.meta" in arrays:
        if not args.teacher:
            raise UsageError("evaluating a student needs --teacher")
        teacher = ToyNetwork.from_state("teacher", checkpoint.load(args.teacher))
        metrics = evaluate_student(StudentBundle.from_state(arrays), teacher, samples)
        metrics["kind"] = "student"
    else:
        metrics = evaluate_teacher(ToyNetwork.from_state("teacher", arrays), samples)
        metrics["kind"] = "teacher"
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _png(path: Path, grid: np.ndarray, vmax: float | None = None) -> None:
    from PIL import Image
    g = np.asarray(grid, dtype=np.float64)
    top = vmax if vmax is not None else (g.max() if g.max() > 0 else 1.0)
    img = np.clip(np.round(g / top * 255.0), 0, 255).astype(np.uint8)
    # row 0 is y_min; flip so +y points up in the image
    Image.fromarray(img[::-1]).save(path, format="PNG")


def mask_maps(sample, cfg: ExperimentConfig, teacher=None, student=None) -> dict[str, np.ndarray]:
    """Pre-head partition, M, S and attention maps for one scene."""
    from .attention import adapt_student, attention_maps
    from .harness.networks import make_student, make_teacher
    from .harness.train import StudentBundle, default_pairs
    from .losses import DistillTarget, region_weights
    from .scene import scene_teacher_heatmap
    from .tensor import Tensor
    k = sample.gt_heatmap.shape[0]
    if teacher is None:
        teacher = make_teacher(sample.teacher_input.shape[0], k, cfg.seed)
        h_t = scene_teacher_heatmap(sample, cfg.scene)
    else:
        h_t = np.clip(teacher.forward(sample.teacher_input, training=False)["heatmap"].data, 0, 1)
    if student is None:
        net = make_student(sample.student_input.shape[0], k, cfg.seed)
        student = StudentBundle(net, default_pairs(teacher, net, cfg.seed))
    f_t = teacher.forward(sample.teacher_input, training=False)["H"]
    f_s = student.net.forward(sample.student_input, training=False)["H"]
    pair = next(p for p in student.pairs if p.teacher_layer == "H")
    f_sa = adapt_student(f_s, pair.module, training=False)
    target = DistillTarget(sample.boxes, sample.grid, h_t, sample.gt_heatmap)
    partition, mask, s = region_weights(target, f_t.shape[1:], cfg.distill.eta, cfg.distill.gamma, True)
    att = attention_maps(Tensor(f_t.data), Tensor(f_sa.data), cfg.distill.tau)
    return {"labels": partition.label.astype(np.float64), "mask_m": mask.m, "scaling_s": s,
            "attn_teacher": att.n_teacher, "attn_student": att.n_student, "attn_combined": att.a}


def cmd_masks(args) -> int:
    from .harness.networks import ToyNetwork
    from .harness.train import StudentBundle
    cfg = _experiment(args)
    sample = read_scene(args.sample)
    teacher = ToyNetwork.from_state("teacher", checkpoint.load(args.teacher)) if args.teacher else None
    student = StudentBundle.from_state(checkpoint.load(args.student)) if args.student else None
    maps = mask_maps(sample, cfg, teacher, student)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in MASK_OUTPUTS:
        np.save(out / f"{name}.npy", maps[name])
        _png(out / f"{name}.png", maps[name], vmax=3.0 if name == "labels" else None)
    print(f"wrote {2 * len(MASK_OUTPUTS)} files to {out}")
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "distillbev"
    runs = {"distill on": read_metrics_csv(Path(args.metrics))}
    if args.baseline:
        runs["distill off"] = read_metrics_csv(Path(args.baseline))
    panels = ("det_loss", "feature_mse_to_teacher", "synthetic_ap")
    fig, axes = plt.subplots(1, len(panels), figsize=(12, 3.5))
    for ax, col in zip(axes, panels):
        for label, rows in runs.items():
            ax.plot([r["epoch"] for r in rows], [r[col] for r in rows], marker="o", ms=3, label=label)
        ax.set_title(col)
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen, "train-teacher": cmd_train_teacher, "distill": cmd_distill, "eval": cmd_eval,
    "masks": cmd_masks, "plot": cmd_plot,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.command == "config":
        sys.stdout.write(default_config_text())
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SceneFormatError, checkpoint.CheckpointError, ArithmeticError, RuntimeError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
