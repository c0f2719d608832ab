"""Command-line interface: one subcommand per pipeline stage.

Every subcommand writes machine-readable artifacts (JSON reports, per-class
CSV tables, tensor files) atomically, renders companion PNG figures unless
--no-figures is given, and prints the primary output path on stdout. Errors
from the library exit with code 1 and a one-line diagnostic on stderr;
usage errors exit with code 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import figures
from .calibration import fit_temperature, mean_nll
from .distribution import ClassDistribution, label_frequencies
from .errors import ConfigError, DarsError, IoError
from .pseudo_label import (
    cbst_label,
    dars_label,
    st_label,
    write_label_report,
    write_label_report_csv,
    write_pseudo_labels,
)
from .scenegen import SceneConfig, default_preset, generate_dataset
from .selftrain import (
    PipelineConfig,
    evaluate,
    run_pipeline,
    write_eval_csv,
    write_eval_report,
    write_loss_trace,
)
from .tensor_store import atomic_write_json, atomic_write_text, load_manifest
from .toymodel import (
    LinearPixelModel,
    TrainConfig,
    init_from_labeled,
    load_model,
    predict_corpus,
    save_model,
    train,
)


def _load_target(path: str):
    """A stats JSON, a {"freqs": [...]} document, or a bare frequency list."""
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoError(f"cannot read target {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if isinstance(obj, list):
        return np.asarray(obj, dtype=np.float64)
    if isinstance(obj, dict) and "counts" in obj:
        return ClassDistribution.from_json_obj(obj)
    if isinstance(obj, dict) and "freqs" in obj:
        return np.asarray(obj["freqs"], dtype=np.float64)
    raise ConfigError(f"{path}: expected a stats document or a frequency list")


def _load_temperature(arg: str) -> float | None:
    if arg is None or arg == "none":
        return None
    try:
        obj = json.loads(Path(arg).read_text())
    except OSError as exc:
        raise IoError(f"cannot read temperature {arg}: {exc}") from exc
    try:
        return float(obj["temperature"])
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"{arg}: expected a calibrate report") from exc


def _cmd_stats(args) -> int:
    manifest = load_manifest(args.labels)
    dist = label_frequencies(list(manifest.labels()), manifest.num_classes)
    out = Path(args.out)
    atomic_write_json(out, dist.to_json_obj())
    rows = ["class,count,freq"]
    for j in range(dist.num_classes):
        rows.append(f"{j},{dist.counts[j]},{dist.freqs[j]:.9g}")
    atomic_write_text(out.with_suffix(".csv"), "\n".join(rows) + "\n")
    if not args.no_figures:
        figures.fig_class_distribution([("labeled", dist.freqs)], out.with_suffix(".png"))
    print(out)
    return 0


def _cmd_label(args) -> int:
    manifest = load_manifest(args.preds)
    temperature = _load_temperature(args.temperature)
    target = _load_target(args.target) if args.target else None
    if args.method == "dars":
        if target is None:
            raise ConfigError("--target is required for method dars")
        result = dars_label(
            manifest, target, args.alpha, args.seed,
            temperature=temperature, shards=args.threads,
        )
    elif args.method == "st":
        result = st_label(manifest, args.alpha, target, temperature)
    else:
        result = cbst_label(manifest, args.alpha, target, temperature)
    out_dir = Path(args.out)
    write_pseudo_labels(result, out_dir, manifest)
    report = Path(args.report) if args.report else out_dir / "report.json"
    write_label_report(result, report)
    write_label_report_csv(result, report.with_suffix(".csv"), target)
    if not args.no_figures:
        figures.render_label_report_figure(report, target=target)
    print(report)
    return 0


def _cmd_calibrate(args) -> int:
    manifest = load_manifest(args.preds)
    logits, labels = [], []
    for e in manifest.entries:
        logits.append(manifest.load_logits(e))
        labels.append(manifest.load_label(e))
    temperature = fit_temperature(logits, labels)
    report = {
        "temperature": temperature.value,
        "nll_before": mean_nll(logits, labels, 1.0),
        "nll_after": mean_nll(logits, labels, temperature),
    }
    atomic_write_json(args.out, report)
    print(args.out)
    return 0


def _cmd_synth(args) -> int:
    if args.config:
        cfg = SceneConfig.load(args.config)
    else:
        cfg = default_preset(seed=args.seed)
    bundle = generate_dataset(cfg, args.labeled, args.unlabeled, args.test, args.out)
    if not args.no_figures:
        figures.fig_class_distribution(
            [("labeled", bundle.labeled_distribution.freqs)],
            Path(args.out) / "target.png",
        )
    print(bundle.root)
    return 0


def _cmd_train(args) -> int:
    labeled = load_manifest(args.labeled)
    pseudo = load_manifest(args.pseudo) if args.pseudo else None
    scale_range = None
    if args.scale_lo is not None or args.scale_hi is not None:
        if args.scale_lo is None or args.scale_hi is None:
            raise ConfigError("give both --scale-lo and --scale-hi or neither")
        scale_range = (args.scale_lo, args.scale_hi)
    cfg = TrainConfig(
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        l2=args.l2,
        seed=args.seed,
        scale_range=scale_range,
    )
    if args.init:
        model = load_model(args.init)
    elif args.zero_init:
        model = LinearPixelModel.zeros(labeled.num_classes)
    else:
        model = init_from_labeled(labeled)
    result = train(model, labeled, pseudo, cfg)
    out = Path(args.out)
    save_model(result.model, out, seed=args.seed, epochs_trained=args.epochs)
    write_loss_trace(result.loss_trace, out / "loss_trace.csv")
    if not args.no_figures:
        figures.fig_loss_trace(result.loss_trace, out / "loss_trace.png")
    print(out)
    return 0


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    manifest = load_manifest(args.data)
    out = predict_corpus(model, manifest, args.out)
    print(out.path)
    return 0


def _cmd_selftrain(args) -> int:
    cfg = PipelineConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    result = run_pipeline(cfg, args.out, render_figures=not args.no_figures)
    print(result.run_dir / "summary.json")
    return 0


def _cmd_eval(args) -> int:
    pred = load_manifest(args.pred)
    truth = load_manifest(args.truth)
    kwargs = {}
    if args.tail:
        kwargs["tail_classes"] = [int(t) for t in args.tail.split(",")]
    if args.groups:
        try:
            groups = json.loads(Path(args.groups).read_text())
        except OSError as exc:
            raise IoError(f"cannot read groups {args.groups}: {exc}") from exc
        kwargs["groups"] = [tuple(g) for g in groups]
    report = evaluate(pred, truth, **kwargs)
    out = Path(args.report)
    write_eval_report(report, out)
    write_eval_csv(report, out.with_suffix(".csv"))
    if not args.no_figures:
        figures.fig_eval(report.to_json_obj(), out.with_suffix(".png"))
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dars",
        description="Distribution-aligned pseudo-labeling and self-training lab",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed")
    common.add_argument(
        "--threads",
        type=int,
        default=max(1, os.cpu_count() or 1),
        help="worker/shard cap; results never depend on it",
    )
    common.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("stats", parents=[common], help="class distribution of a labeled manifest")
    p.add_argument("--labels", required=True, help="manifest with label_path entries")
    p.add_argument("--out", required=True, help="output stats JSON")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("label", parents=[common], help="generate pseudo labels")
    p.add_argument("--method", required=True, choices=["st", "cbst", "dars"])
    p.add_argument("--alpha", required=True, type=float, help="labeling ratio in percent")
    p.add_argument("--target", help="target distribution JSON (required for dars)")
    p.add_argument("--temperature", default="none", help="calibrate report path or 'none'")
    p.add_argument("--preds", required=True, help="manifest with prob/logit paths")
    p.add_argument("--out", required=True, help="output directory for label tensors")
    p.add_argument("--report", help="report JSON path (default <out>/report.json)")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("calibrate", parents=[common], help="fit a softmax temperature")
    p.add_argument("--preds", required=True, help="manifest with logit and label paths")
    p.add_argument("--out", required=True, help="output JSON")
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--config", help="scene config JSON (default: built-in preset)")
    p.add_argument("--labeled", type=int, default=64)
    p.add_argument("--unlabeled", type=int, default=256)
    p.add_argument("--test", type=int, default=32)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the pixel classifier")
    p.add_argument("--labeled", required=True)
    p.add_argument("--pseudo", help="optional pseudo-label manifest")
    p.add_argument("--init", help="start from this model directory")
    p.add_argument("--zero-init", action="store_true", help="start from zero weights")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--scale-lo", type=float)
    p.add_argument("--scale-hi", type=float)
    p.add_argument("--out", required=True, help="output model directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", parents=[common], help="write probability/logit volumes")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--data", required=True, help="manifest with image paths")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("selftrain", parents=[common], help="run the full iterative pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=_cmd_selftrain)
    # selftrain takes its seed from the config unless --seed is given explicitly
    p.set_defaults(seed=None)

    p = sub.add_parser("eval", parents=[common], help="evaluate predictions against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--tail", help="comma-separated tail class indices")
    p.add_argument("--groups", help="JSON file with class groups")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except DarsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
