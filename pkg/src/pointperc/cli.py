"""Command-line entry point.

Subcommands: synth (generate a dataset), train, eval, gradcheck,
connectivity, bench. Every run prints its resolved configuration; every
run is deterministic for a given --seed (timings excluded). Reports are
CSV files; unless --no-figures is given, commands that write CSVs also
render matplotlib figures next to them.

Exit codes: 0 success, 1 check failure, 2 input or I/O error,
3 numerical failure during optimization.
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .attention import AttentionError
from .autodiff import CheckpointError
from .cloud import GeometryError
from .config import ConfigError, RunConfig, echo_config, load_model, parse_config
from .data import (
    SEMANTIC_CLASSES,
    FormatError,
    SynthError,
    load_scene,
    save_scene,
    scene_indices,
    synth_scene,
)
from .gradsuite import SUITE, run_suite
from .metrics import (
    CenterDistanceMatcher,
    ConfusionMatrix,
    IouMatcher,
    MetricsError,
    average_precision,
    bench_search,
    connectivity,
    format_ap_csv,
    format_bench_csv,
    format_connectivity_csv,
    format_iou_csv,
    miou,
)
from .model import ModelError, build_windows, predict_scene
from .train import TrainingError, train_loop

DET_CLASS_NAMES = SEMANTIC_CLASSES[2:]


def _load_run(config_path) -> RunConfig:
    return parse_config(config_path) if config_path else RunConfig()


def _print_config(run: RunConfig, seed: int) -> None:
    print("# resolved configuration")
    for line in echo_config(run):
        print(line)
    print(f"# seed = {seed}")


def _load_dataset(root) -> list:
    indices = scene_indices(root)
    if not indices:
        raise FormatError(f"{root}: dataset has no scenes")
    return [load_scene(root, i) for i in indices]


def _write(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)
    print(f"wrote {path}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    run = _load_run(args.config)
    _print_config(run, args.seed)
    for sub in ("points", "labels", "boxes"):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        save_scene(args.out, i, synth_scene(run.synth, rng))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _load_run(args.config)
    if args.task:
        run.train = replace(run.train, task=args.task)
    _print_config(run, args.seed)
    scenes = _load_dataset(args.data)
    model, rows = train_loop(scenes, run.model, run.train, out_dir=args.out,
                             seed=args.seed, echo=echo_config(run))
    print(f"trained {len(rows)} steps on {len(scenes)} scenes; "
          f"outputs in {args.out}")
    if rows:
        print(f"final loss {rows[-1]['total']:.6g}")
        if not args.no_figures:
            from . import plots
            fig = plots.plot_loss_curves(os.path.join(args.out, "losses.csv"),
                                         os.path.join(args.out, "loss_curves.png"))
            print(f"wrote {fig}")
    return 0


def cmd_eval(args) -> int:
    model, run = load_model(args.ckpt)
    _print_config(run, args.seed)
    scenes = _load_dataset(args.data)
    cm = ConfusionMatrix(run.model.num_classes)
    pred_boxes, gt_boxes = [], []
    for scene in scenes:
        labels, boxes = predict_scene(model, scene.cloud)
        cm.update(labels, scene.cloud.labels)
        pred_boxes.append(boxes)
        gt_boxes.append(scene.boxes)
    per_class_iou, miou_val = miou(cm)
    matcher = CenterDistanceMatcher(args.dist) if args.matcher == "dist" \
        else IouMatcher(args.iou)
    per_class_ap, map_val = average_precision(pred_boxes, gt_boxes, matcher)

    os.makedirs(args.out, exist_ok=True)
    iou_csv = os.path.join(args.out, "seg_iou.csv")
    ap_csv = os.path.join(args.out, "det_ap.csv")
    _write(iou_csv, format_iou_csv(per_class_iou, miou_val, SEMANTIC_CLASSES))
    _write(ap_csv, format_ap_csv(per_class_ap, map_val, DET_CLASS_NAMES))
    print(f"miou = {miou_val:.6g}")
    print(f"map = {map_val:.6g}")
    if not args.no_figures:
        from . import plots
        print(f"wrote {plots.plot_class_iou(iou_csv, os.path.join(args.out, 'seg_iou.png'))}")
        print(f"wrote {plots.plot_class_ap(ap_csv, os.path.join(args.out, 'det_ap.png'))}")
    return 0


def cmd_gradcheck(args) -> int:
    print(f"# op = {args.op}")
    print(f"# tol = {args.tol!r}")
    print(f"# seed = {args.seed}")
    names = None if args.op == "all" else [args.op]
    failed = 0
    for name, report in run_suite(names, tol=args.tol, seed=args.seed):
        status = "pass" if report.passed else "FAIL"
        print(f"{name}: {status} (max rel err {report.max_rel_err:.3e} "
              f"over {report.checked} entries)")
        failed += 0 if report.passed else 1
    if failed:
        print(f"{failed} operator(s) failed the gradient check")
        return 1
    return 0


def cmd_connectivity(args) -> int:
    print(f"# window_size = {args.window_size}")
    print(f"# radius = {args.radius!r}")
    print(f"# samples = {args.samples}")
    print(f"# search = \"{args.search}\"")
    print(f"# seed = {args.seed}")
    scene = load_scene(args.data, args.scene)
    windows = build_windows(scene.cloud.coords, args.radius, args.window_size,
                            args.search)
    report = connectivity(scene.cloud, windows, samples=args.samples,
                          rng=np.random.default_rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "connectivity.csv")
    _write(csv_path, format_connectivity_csv(report))
    print(f"hops min/mean/max = {report.hops_min:g}/{report.hops_mean:g}/"
          f"{report.hops_max:g} over {report.sample_size} samples")
    if not args.no_figures:
        from . import plots
        fig = plots.plot_connectivity(csv_path, os.path.join(args.out, "connectivity.png"))
        print(f"wrote {fig}")
    return 0


def cmd_bench(args) -> int:
    print(f"# search = \"{args.search}\"")
    print(f"# points = {list(args.points)}")
    print(f"# window = {list(args.window)}")
    print(f"# reps = {args.reps}")
    print(f"# seed = {args.seed}")
    methods = ("vq", "knn") if args.search == "both" else (args.search,)
    rows = []
    for n in args.points:
        for m in args.window:
            for method in methods:
                row = bench_search(n, m, args.radius, method, repeats=args.reps,
                                   rng=np.random.default_rng(args.seed))
                print(f"{method} N={n} M={m}: {row['median_us']:.1f} us/query "
                      f"[{'pass' if row['correct'] else 'FAIL'}]")
                rows.append(row)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "bench.csv")
    _write(csv_path, format_bench_csv(rows))
    if not args.no_figures:
        from . import plots
        print(f"wrote {plots.plot_bench(csv_path, os.path.join(args.out, 'bench.png'))}")
    return 0 if all(r["correct"] for r in rows) else 1


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pointperc",
        description="Point-based multi-task perception: synthetic data, "
                    "training, evaluation, and verification harnesses.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=42, help="RNG seed (default 42)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", help="run configuration file")
    sp.add_argument("--count", type=int, default=8, help="number of scenes")
    sp.add_argument("--out", required=True, help="dataset directory")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset")
    sp.add_argument("--config", help="run configuration file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--task", choices=("seg", "det", "multi"),
                    help="override the configured task mode")
    sp.add_argument("--no-figures", action="store_true",
                    help="skip figure rendering")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--matcher", choices=("dist", "iou"), default="dist",
                    help="detection matching rule")
    sp.add_argument("--dist", type=float, default=2.0,
                    help="center-distance threshold in meters")
    sp.add_argument("--iou", type=float, default=0.5,
                    help="IoU threshold for --matcher iou")
    sp.add_argument("--out", default=".", help="report directory")
    sp.add_argument("--no-figures", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--op", default="all", choices=["all"] + list(SUITE),
                    help="which operator to check")
    sp.add_argument("--tol", type=float, default=1e-4,
                    help="relative error tolerance")
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("connectivity", help="window-graph reachability analysis")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--scene", type=int, default=0, help="scene index")
    sp.add_argument("--window-size", type=int, default=32)
    sp.add_argument("--radius", type=float, default=2.0)
    sp.add_argument("--samples", type=int, default=20)
    sp.add_argument("--search", choices=("vq", "knn"), default="vq")
    sp.add_argument("--out", default=".", help="report directory")
    sp.add_argument("--no-figures", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_connectivity)

    sp = sub.add_parser("bench", help="neighbor-search timing comparison")
    sp.add_argument("--search", choices=("vq", "knn", "both"), default="both")
    sp.add_argument("--points", type=int, nargs="+", default=[10000, 100000])
    sp.add_argument("--window", type=int, nargs="+", default=[32])
    sp.add_argument("--radius", type=float, default=2.0)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--out", default=".", help="report directory")
    sp.add_argument("--no-figures", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, SynthError, CheckpointError, MetricsError,
            ModelError, GeometryError, AttentionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
